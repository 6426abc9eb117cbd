import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fbsdelab import DegenerateBins, MissingDerivatives, SmoothnessViolation, builtin_ou
from fbsdelab import builtin_regime_switching, builtin_worked_example
from fbsdelab.feynman_kac import forward_drift, reconstruct_triple
from fbsdelab.malliavin import (covariance_bounds, finite_difference_flow, interpolation_tolerance,
                                malliavin_backward, malliavin_covariance, malliavin_forward,
                                second_malliavin, version_identity)
from fbsdelab.models import model_from_dict
from fbsdelab.pde import SpaceTimeGrid, solve_decoupling_field
from fbsdelab.sde import simulate_forward

SMOOTH = {"b": "C2", "sigma": "C2", "f": "C2", "phi": "C2"}


def tanh_drift_model():
    return model_from_dict({"inline": {"b": [{"type": "tanh", "scale": 0.8}], "sigma": 1.0,
                                       "phi": [{"type": "sigmoid"}]},
                            "sigma_const": 1.0, "smoothness_flags": SMOOTH, "name": "tanh_drift"})


def setup(model, M=128, n=4000, seed=1, J=400, half=6.0, record="all"):
    g = SpaceTimeGrid.around(model, M, J, half)
    fld = solve_decoupling_field(model, g)
    bt = forward_drift(fld, model)
    ens = simulate_forward(bt, 1.0, model.x0, g, n, seed, record=record)
    return g, fld, bt, ens


def test_brownian_dx_is_one():
    m = builtin_worked_example()
    _, fld, _, ens = setup(m, M=32, n=200)
    s = malliavin_forward(ens, fld, m)
    np.testing.assert_array_equal(s.DX_array()[:, 0, :], 1.0)
    np.testing.assert_array_equal(s.diagonal_DX, 1.0)


@given(st.floats(0.1, 3.0))
@settings(max_examples=10)
def test_ou_dx_exact(beta):
    m = builtin_ou(beta=beta)
    g = SpaceTimeGrid.around(m, 32, 40, 6.0)
    fld = solve_decoupling_field(m, g)
    ens = simulate_forward(forward_drift(fld, m), 1.0, 0.0, g, 50, 2)
    DX = malliavin_forward(ens, fld, m).DX_array()
    t = g.t_nodes
    expected = np.where(t[None, :] >= t[:, None], np.exp(-beta * (t[None, :] - t[:, None])), 0.0)
    np.testing.assert_allclose(DX, np.broadcast_to(expected, DX.shape), rtol=1e-12, atol=0)


def test_cocycle_and_positivity():
    m = tanh_drift_model()
    _, fld, _, ens = setup(m, M=64, n=500)
    s = malliavin_forward(ens, fld, m)
    DX = s.DX_array()
    assert np.all(DX[:, np.triu_indices(DX.shape[1])[0], np.triu_indices(DX.shape[1])[1]] > 0)
    for i in (5, 20, 40):
        np.testing.assert_allclose(DX[:, i, -1] * DX[:, 0, i], DX[:, 0, -1], rtol=1e-12)


def test_fd_flow_generic_model():
    m = tanh_drift_model()
    g, fld, bt, ens = setup(m, M=256, n=20_000, record="final")
    s = malliavin_forward(ens, fld, m)
    h = 1e-4

    def endpoint(x):
        return simulate_forward(bt, 1.0, x, g, 20_000, 1, record="final").X_T

    fd = finite_difference_flow(endpoint, 0.0, h).mean()
    assert abs(s.DX(0, 1).mean() - fd) / abs(fd) <= 0.01


def test_backward_and_diagonal():
    m = builtin_worked_example()
    _, fld, _, ens = setup(m, M=64, n=2000, record=8)
    tr = reconstruct_triple(fld, ens)
    s = malliavin_forward(ens, fld, m)
    DY, DZ = malliavin_backward(tr, fld, s, m)
    diag = np.array([np.abs(DY[:, a, i] - tr.Z[:, i]).mean() for a, i in enumerate(s.s_pos)])
    assert diag.max() <= interpolation_tolerance(fld)
    const = model_from_dict({"inline": {"phi": 0.7}, "sigma_const": 1.0})
    _, f2, _, e2 = setup(const, M=16, n=100)
    s2 = malliavin_forward(e2, f2, const)
    DY2, DZ2 = malliavin_backward(reconstruct_triple(f2, e2), f2, s2, const)
    assert np.abs(DY2).max() <= 1e-12 and np.abs(DZ2).max() <= 1e-9


@pytest.mark.filterwarnings("ignore:regime_switching. Picard tolerance")
def test_missing_derivatives():
    rs = builtin_regime_switching()
    g = SpaceTimeGrid.around(rs, 8, 40, 4.0)
    fld = solve_decoupling_field(rs, g)
    from fbsdelab.malliavin import drift_x_derivative
    with pytest.raises(MissingDerivatives):
        drift_x_derivative(fld, rs, route="chain")
    m = model_from_dict({"inline": {"sigma": [{"type": "tanh"}, {"type": "const", "value": 2}]}})
    g = SpaceTimeGrid.around(m, 8, 40, 4.0)
    with pytest.raises(MissingDerivatives):
        drift_x_derivative(solve_decoupling_field(m, g), m, route="table")


def test_covariance_brownian_and_ou():
    n, S, T = 2000, 64, 1.0
    s_nodes = np.linspace(0, T, S + 1)[:-1]
    X = np.random.default_rng(0).standard_normal((n, S))
    brown = covariance_bounds(None, np.ones((n, S)), X, s_nodes, T)
    assert brown["l_hat"] == pytest.approx(T) and brown["L_hat"] == pytest.approx(T)
    beta = 1.5
    DF = np.broadcast_to(np.exp(-beta * (T - s_nodes)), (n, S))
    gam = malliavin_covariance(DF, X, s_nodes, T)
    exact = (1 - math.exp(-2 * beta * T)) / (2 * beta)
    assert np.abs(gam - exact).max() <= 2 * beta * T / S * exact  # left-point quadrature
    rep = covariance_bounds(None, DF, X, s_nodes, T, l=0.0, L=exact * 0.5)
    assert rep["l_hat"] <= rep["L_hat"] and rep["violation_fraction"] == 1.0
    with pytest.raises(DegenerateBins):
        malliavin_covariance(np.ones((100, S)), X[:100], s_nodes, T)


def test_second_order_vanishes_for_ou():
    # the continuous formula cancels exactly; the discrete residue is O(dt)
    m = builtin_ou(beta=1.0)
    sups = []
    for M in (64, 256):
        _, fld, _, ens = setup(m, M=M, n=300)
        s = second_malliavin(ens, fld, m, stride=M // 8)
        sups.append(np.abs(s.DDX).max())
    assert np.abs(s.DDX).mean() <= 1e-3
    assert math.log(sups[0] / sups[1], 4) >= 0.9


def test_second_order_brownian_chain_rule():
    m = builtin_worked_example()
    _, fld, _, ens = setup(m, M=32, n=300)
    s = second_malliavin(ens, fld, m)
    assert not s.DDX.any()
    C = s.DDY.shape[1]
    for j in range(C):
        np.testing.assert_allclose(s.DDY[:, 0, 0, j], s.DZ[:, 0, j])


def test_second_order_matches_flow_second_difference():
    # for sigma = 1, D_0 D_0 X_t is the second derivative of the flow in x0
    m = tanh_drift_model()
    errs = []
    for M in (128, 512):
        g, fld, bt, ens = setup(m, M=M, n=4000, record="final")
        s = second_malliavin(ens, fld, m, stride=M)
        h = 1e-2

        def endpoint(x):
            return simulate_forward(bt, 1.0, x, g, 4000, 1, record="final").X_T

        fd2 = (endpoint(h) - 2 * endpoint(0.0) + endpoint(-h)) / h ** 2
        ddx = s.DDX[:, 0, 0, -1]
        errs.append(np.sqrt(np.mean((ddx - fd2) ** 2) / np.mean(fd2 ** 2)))
    assert errs[1] <= 0.1
    assert math.log(errs[0] / errs[1], 4) >= 0.4  # strong order 1/2 of the Ito sum
    vi = version_identity(s)
    assert vi["mean_abs"] <= interpolation_tolerance(fld, "v_xx")


@pytest.mark.filterwarnings("ignore:regime_switching. Picard tolerance")
def test_second_order_refuses_rough_models():
    rs = builtin_regime_switching()
    g = SpaceTimeGrid.around(rs, 8, 40, 4.0)
    fld = solve_decoupling_field(rs, g)
    ens = simulate_forward(forward_drift(fld, rs), 1.0, 0.0, g, 10, 1)
    with pytest.raises(SmoothnessViolation):
        second_malliavin(ens, fld, rs)
