import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fbsdelab import (ConfigInvalid, InvalidInterval, MissingDerivatives, builtin_ou,
                      builtin_pricing_model, builtin_regime_switching, builtin_worked_example)
from fbsdelab.models import CoefficientSet, ModelInstance, model_from_dict, sigmoid

finite = st.floats(-50, 50, allow_nan=False)


def test_worked_example_values():
    m = builtin_worked_example()
    c = m.coefficients
    assert m.T == 1.0 and m.x0 == 0.0
    assert c.terminal_phi(0.0) == 0.5
    assert c.driver_f(0.3, 1.0, 0.0, 0.0) == 0.0
    assert c.driver_f(0.0, 0.0, 2.0, 3.0) == 5.0
    assert builtin_worked_example(T=2.0).T == 2.0


@given(finite)
def test_sigmoid_range_and_monotone(x):
    s = float(sigmoid(x))
    assert 0.0 <= s <= 1.0
    assert float(sigmoid(x + 1.0)) >= s


def test_worked_example_invariants():
    c = builtin_worked_example().coefficients
    inv = c.check_invariants(np.linspace(0, 1, 5), np.linspace(-6, 6, 41), y_samples=[0.0])
    assert inv["ellipticity"] and inv["terminal_bound"] and inv["ell_nondecreasing"]


def test_regime_switching_conventions():
    m = builtin_regime_switching(k1=2.0, k2=-1.0, alpha=0.5, beta=1.0)
    b = m.coefficients.drift_b
    assert b(0.0, 0.0, 0.5, 0.0) == 2.0  # y = alpha uses k1
    assert b(0.0, 0.0, 0.5 + 1e-12, 0.0) == -1.0
    assert b(0.0, 1.0, 0.0, 0.0) == 1.0
    assert m.coefficients.driver_f(0.0, 3.0, 7.0, 1.0) == 1.0  # h = 0
    assert m.coefficients.smoothness_flags["b"] == "measurable"
    same = builtin_regime_switching(k1=0.7, k2=0.7, beta=2.0)
    ys = np.linspace(-3, 3, 13)
    np.testing.assert_array_equal(same.coefficients.drift_b(0.0, 1.0, ys, 0.0), 0.7 - 2.0)
    assert same.coefficients.is_at_least("b", "C1")


def test_regime_switching_flags_match_formula():
    # declared discontinuity in y is real, and the drift is constant away from alpha
    b = builtin_regime_switching(k1=1.0, k2=-1.0, alpha=0.0).coefficients.drift_b
    ys = np.linspace(-2, 2, 401)
    vals = b(0.0, 0.0, ys, 0.0)
    jumps = np.flatnonzero(np.diff(vals))
    assert jumps.size == 1
    assert ys[jumps[0]] <= 0.0 < ys[jumps[0] + 1]


def test_pricing_pair():
    m0, mF = builtin_pricing_model(lam=0.05, lam_hat=0.1, R=0.2, sigma=0.3)
    b = m0.coefficients.drift_b
    assert b(0.0, 0.2, 0.0, 0.0) == pytest.approx(-(0.1 + 0.045))  # x = R is high-dividend
    assert b(0.0, 0.1, 0.0, 0.0) == pytest.approx(-(0.05 + 0.045))
    x = np.linspace(-1, 1, 9)
    np.testing.assert_array_equal(m0.coefficients.terminal_phi(x), mF.coefficients.terminal_phi(x))
    flat, _ = builtin_pricing_model(lam=0.1, lam_hat=0.1)
    assert np.ptp(flat.coefficients.drift_b(0.0, x, 0.0, 0.0)) == 0.0
    with pytest.raises(InvalidInterval):
        builtin_pricing_model(C_interval=(1.0, 0.0))
    with pytest.raises(ValueError):
        builtin_pricing_model(sigma=0.0)


def test_derivatives_and_missing():
    ou = builtin_ou(beta=2.0).coefficients
    assert ou.derivative("b_x")(0.0, 1.0, 0.0, 0.0) == -2.0
    assert ou.derivative("sigma_x")(0.0, 1.0) == 0.0
    with pytest.raises(MissingDerivatives):
        ou.derivative("phi_xx")
    assert builtin_worked_example().coefficients.has("f_zz")


def test_immutable_and_validated():
    c = builtin_worked_example().coefficients
    with pytest.raises(dataclasses.FrozenInstanceError):
        c.lipschitz_K = 3.0
    with pytest.raises(TypeError):
        c.smoothness_flags["b"] = "measurable"
    with pytest.raises(ValueError):
        dataclasses.replace(c, smoothness_flags={"b": "smooth"})
    with pytest.raises(ValueError):
        dataclasses.replace(c, optional_derivatives={"q_x": None})
    with pytest.raises(ValueError):
        ModelInstance(c, t0=1.0, horizon_T=1.0)


@given(finite, finite, finite, finite)
def test_coefficients_are_pure(t, x, y, z):
    for m in (builtin_worked_example(), builtin_regime_switching(), builtin_pricing_model()[1]):
        c = m.coefficients
        a = (c.drift_b(t, x, y, z), c.driver_f(t, x, y, z), c.diffusion_sigma(t, x),
             c.terminal_phi(x))
        b = (c.drift_b(t, x, y, z), c.driver_f(t, x, y, z), c.diffusion_sigma(t, x),
             c.terminal_phi(x))
        for u, v in zip(a, b):
            assert np.array_equal(u, v, equal_nan=True)


def test_inline_terms():
    doc = {"inline": {
        "b": [{"var": "x", "type": "poly", "coefficients": [1.0, -2.0]},
              {"var": "y", "type": "piecewise", "breaks": [0.0],
               "pieces": [{"type": "const", "value": -1.0}, {"type": "const", "value": 1.0}]}],
        "sigma": 2.0,
        "f": [{"var": "z", "type": "tanh", "scale": 3.0}],
        "phi": [{"type": "ramp", "strike": 0.0, "width": 2.0},
                {"type": "table", "x": [0.0, 1.0, 2.0], "y": [0.0, 1.0, 4.0]}]},
        "x0": 0.5, "T": 2.0, "name": "mixed"}
    m = model_from_dict(doc)
    c = m.coefficients
    assert (m.x0, m.T, m.name) == (0.5, 2.0, "mixed")
    assert c.drift_b(0.0, 1.0, 0.0, 0.0) == 1.0 - 2.0 + 1.0  # y = 0 takes the right piece
    assert c.drift_b(0.0, 1.0, -0.1, 0.0) == -2.0
    assert c.diffusion_sigma(0.3, -4.0) == 2.0
    assert c.driver_f(0.0, 0.0, 0.0, 0.5) == pytest.approx(3.0 * math.tanh(0.5))
    assert c.terminal_phi(1.0) == pytest.approx(0.5 + 1.0)
    assert c.terminal_phi(5.0) == pytest.approx(1.0 + 4.0)  # table clamps outside its range


@given(st.lists(st.floats(-3, 3), min_size=1, max_size=4), finite)
def test_poly_term_matches_polyval(coefs, x):
    m = model_from_dict({"inline": {"phi": [{"type": "poly", "coefficients": coefs}]}})
    assert float(m.coefficients.terminal_phi(x)) == pytest.approx(
        float(np.polynomial.polynomial.polyval(x, coefs)), rel=1e-12, abs=1e-9)


@pytest.mark.parametrize("doc", [
    {"builtin": "nope"},
    {"builtin": "ou", "params": {"gamma": 1.0}},
    {"inline": {"phi": [{"type": "cubic"}]}},
    {"inline": {"sigma": [{"var": "y", "type": "const", "value": 1.0}]}},
    {"inline": {"phi": [{"type": "table", "x": [1.0, 0.0], "y": [0.0, 1.0]}]}},
    {"inline": {"phi": [{"type": "piecewise", "breaks": [0.0], "pieces": []}]}},
    {"builtin": "pricing", "params": {"C": [1.0, 0.0]}},
    {"neither": 1},
])
def test_bad_model_documents(doc):
    with pytest.raises(ConfigInvalid):
        model_from_dict(doc)


def test_pricing_document():
    m0, mF = model_from_dict({"builtin": "pricing", "params": {
        "alpha": 0.2, "C": [0.0, None], "payoff": {"type": "ramp", "strike": 1.0, "width": 0.5}}})
    assert m0.extras["C"].upper == math.inf and m0.extras["C"].lower == 0.0
    assert float(m0.extras["alpha_fn"](0.0, 3.0)) == 0.2
    assert mF.coefficients.terminal_phi(1.25) == 0.5


def test_check_invariants_detects_violation():
    c = CoefficientSet(drift_b=lambda t, x, y, z: 0.0 * x,
                       diffusion_sigma=lambda t, x: 0.5 + 0.0 * x,
                       driver_f=lambda t, x, y, z: 5.0 + 0.0 * x,
                       terminal_phi=lambda x: 3.0 * np.asarray(x),
                       ell=lambda y: -np.asarray(y))
    inv = c.check_invariants([0.0, 1.0], np.linspace(-2, 2, 5))
    assert inv == {"ellipticity": False, "terminal_bound": False, "driver_growth": False,
                   "ell_nondecreasing": False}
