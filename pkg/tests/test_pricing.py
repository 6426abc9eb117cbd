import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fbsdelab import InvalidInterval, builtin_pricing_model, builtin_regime_switching, ramp_payoff
from fbsdelab.oracles import ou_moments, ramp_expectation
from fbsdelab.pde import SpaceTimeGrid
from fbsdelab.pricing import (ConstraintInterval, as_interval, growth_audit, indifference_driver,
                              price_and_hedge, project_onto_interval, quadratic_growth_constant,
                              regime_switching_experiment, value_functions)

finite = st.floats(-20, 20, allow_nan=False)
intervals = st.tuples(st.floats(-5, 5), st.floats(0, 5)).map(lambda p: (p[0], p[0] + p[1]))


def test_projection_examples():
    assert project_onto_interval(-3.5, None) == (-3.5, 0.0)
    assert project_onto_interval(-1.0, [0.0, None]) == (0.0, 1.0)
    assert project_onto_interval(2.0, (0.0, 1.0)) == (1.0, 1.0)
    proj, dist = project_onto_interval(np.array([-1.0, 0.5, 3.0]), (0.0, 1.0))
    np.testing.assert_array_equal(proj, [0.0, 0.5, 1.0])
    np.testing.assert_array_equal(dist, [1.0, 0.0, 2.0])


def test_interval_validation():
    with pytest.raises(InvalidInterval):
        ConstraintInterval(1.0, 0.0)
    with pytest.raises(InvalidInterval):
        ConstraintInterval(float("nan"), 0.0)
    assert as_interval(None).is_real_line
    assert as_interval([None, 2.0]).to_list() == ["-inf", 2.0]


@given(finite, finite, intervals)
def test_projection_idempotent_and_lipschitz(a, b, C):
    pa, _ = project_onto_interval(a, C)
    pb, _ = project_onto_interval(b, C)
    assert project_onto_interval(pa, C) == (pa, 0.0)
    assert abs(pa - pb) <= abs(a - b) + 1e-12


def test_driver_examples():
    alpha = lambda t, x: 0.2 + 0.0 * x  # noqa: E731
    assert indifference_driver(0, 0, -1.0, 1.0, alpha, [0.0, None]) == pytest.approx(-0.5)
    z = np.linspace(-3, 3, 13)
    np.testing.assert_allclose(indifference_driver(0, 0, z, 2.0, alpha, None),
                               z * 0.2 + 0.04 / 4.0)
    # z + alpha / gamma inside C gives the unconstrained value
    inner = indifference_driver(0, 0, 0.5, 1.0, alpha, (0.0, 1.0))
    assert inner == pytest.approx(indifference_driver(0, 0, 0.5, 1.0, alpha, None))
    with pytest.raises(ValueError):
        indifference_driver(0, 0, 0.5, 0.0, alpha, None)


@given(st.floats(0.05, 5.0), st.floats(-2, 2), intervals)
def test_driver_quadratic_growth(gamma, a, C):
    z = np.linspace(-50, 50, 201)
    rep = growth_audit(gamma, lambda t, x: a + 0.0 * x, C, [0.0, 1.0], [-1.0, 1.0], z)
    assert rep["holds"]
    assert rep["constant"] == quadratic_growth_constant(a, gamma)


def ramp_pair(C=(-math.inf, math.inf), alpha=None, lam=0.05):
    return builtin_pricing_model(lam=lam, lam_hat=lam, sigma=0.3, C_interval=C, alpha_fn=alpha,
                                 payoff_F=ramp_payoff(0.0, 0.5))


def test_zero_claim_prices_zero():
    m0, _ = builtin_pricing_model(alpha_fn=lambda t, x: 0.2 + 0.0 * x, C_interval=(0.0, math.inf))
    g = SpaceTimeGrid.around(m0, 50, 120, 3.0)
    s = price_and_hedge((m0, m0), g)
    assert not s.p.any() and not s.delta_grad.any() and not s.delta_proj.any()
    z = s.sigma * s.v_field.v_x
    expect, _ = project_onto_interval(z + 0.2 / s.gamma, s.C)
    np.testing.assert_allclose(s.pi_star, expect)
    vf = value_functions(s, 1.0)
    assert vf["residual"] == 0.0
    np.testing.assert_array_equal(vf["VF"], vf["V0"])


def test_linear_price_matches_oracle():
    m0, mF = ramp_pair()
    g = SpaceTimeGrid.around(m0, 200, 400, 3.0)
    s = price_and_hedge((m0, mF), g)
    assert np.abs(s.v_field.v).max() == 0.0
    drift = -(0.05 + 0.5 * 0.3 ** 2)
    j = np.searchsorted(g.x_nodes, [-0.5, 0.0, 0.5])
    tau = g.T - g.t_nodes[100]
    orc = ramp_expectation(g.x_nodes[j] + drift * tau, 0.3 * math.sqrt(tau), 0.0, 0.5)
    np.testing.assert_allclose(s.p[100, j], orc, atol=1e-3)
    assert s.diagnostics["hedge_gap_sign_corrected"] <= s.diagnostics["hedge_gap_tolerance"]


def test_indifference_identity_and_monotone_value():
    m0, mF = ramp_pair(C=(0.0, math.inf), alpha=lambda t, x: 0.2 + 0.0 * x)
    g = SpaceTimeGrid.around(m0, 50, 120, 3.0)
    s = price_and_hedge((m0, mF), g)
    assert value_functions(s, 0.7)["residual"] <= 1e-10
    # V0 = -exp(-gamma (nu - Y0)) rises towards 0 in gamma when nu - Y0 > 0
    nu = float(np.max(s.v_field.v)) + 1.0
    lo = value_functions(s, nu)["V0"]
    hi = value_functions(dataclasses.replace(s, gamma=2.0 * s.gamma), nu)["V0"]
    assert np.all(hi > lo)


def test_regime_switching_linear_case():
    c, beta, T = 0.4, 1.0, 1.0
    m = builtin_regime_switching(k1=0.3, k2=0.3, beta=beta, phi=lambda x: c + 0.0 * np.asarray(x))
    g = SpaceTimeGrid.around(m, 64, 200, 5.0)
    n = 20_000
    rep, fld, tr = regime_switching_experiment(m, g, n, 3, record_stride=16)
    np.testing.assert_allclose(tr.Y, np.broadcast_to(c + T - tr.t_rec, tr.Y.shape), atol=1e-10)
    np.testing.assert_allclose(tr.Z, 0.0, atol=1e-10)
    # X is OU with mean level 0.3 / beta
    mean, var = ou_moments(0.0, beta, T)
    mean += 0.3 / beta * (1.0 - math.exp(-beta * T))
    assert abs(tr.X[:, -1].mean() - mean) <= 4 * math.sqrt(var / n)
    assert rep["drift_levels_per_slice_max"] == 1
