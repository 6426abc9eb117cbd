import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fbsdelab import (CFLViolation, GridMismatch, PicardDiverged, builtin_regime_switching,
                      builtin_worked_example)
from fbsdelab.models import model_from_dict, sigmoid
from fbsdelab.oracles import heat_field, worked_example_field
from fbsdelab.pde import (DecouplingField, GridFunction, SolverConfig, SpaceTimeGrid,
                          comparison_fraction, gradient_and_hessian, solve_decoupling_field,
                          solve_kolmogorov_U, transformed_drift)


def inline(phi=0.0, f=0.0, b=0.0, sigma=1.0, **kw):
    return model_from_dict({"inline": {"b": b, "sigma": sigma, "f": f, "phi": phi}, **kw})


def test_grid_geometry():
    g = SpaceTimeGrid(0.0, 2.0, 4, -1.0, 3.0, 8)
    assert g.dt == 0.5 and g.dx == 0.5 and g.shape == (5, 9)
    assert g.t_nodes[-1] == 2.0 and g.x_nodes[0] == -1.0
    assert g.contains(0.0) and not g.contains(3.0)
    with pytest.raises(ValueError):
        SpaceTimeGrid(1.0, 1.0, 4, 0.0, 1.0, 8)
    with pytest.raises(ValueError):
        SpaceTimeGrid(0.0, 1.0, 4, 0.0, 1.0, 2)


def test_constant_solution():
    m = inline(phi=2.5)
    fld = solve_decoupling_field(m, SpaceTimeGrid.around(m, 20, 40, 4.0))
    np.testing.assert_allclose(fld.v, 2.5, atol=1e-14)
    np.testing.assert_allclose(fld.v_x, 0.0, atol=1e-12)


def test_heat_semigroup_oracle():
    m = inline(phi=[{"type": "sigmoid"}])
    g = SpaceTimeGrid.around(m, 200, 300, 6.0)
    fld = solve_decoupling_field(m, g)
    orc = heat_field(g.t_nodes, g.x_nodes, sigmoid, 1.0)
    assert np.abs(fld.v - orc).max() <= 1e-3


def test_worked_example_positive_gradient_and_terminal():
    m = builtin_worked_example()
    g = SpaceTimeGrid.around(m, 100, 200, 6.0)
    fld = solve_decoupling_field(m, g)
    assert np.all(fld.v_x > 0)
    assert np.array_equal(fld.v[-1], sigmoid(g.x_nodes))
    assert fld.iteration_report["unconverged_steps"] == 0
    # stored gradient agrees with the central difference of v
    dx = g.dx
    cd = (fld.v[:, 2:] - fld.v[:, :-2]) / (2 * dx)
    assert np.abs(fld.v_x[:, 1:-1] - cd).max() <= 10 * dx ** 2


def test_refinement_order():
    m = builtin_worked_example()
    errs = []
    for n in (50, 100, 200):
        g = SpaceTimeGrid.around(m, n, n, 6.0)
        fld = solve_decoupling_field(m, g)
        errs.append(np.abs(fld.v - worked_example_field(g.t_nodes, g.x_nodes, sigmoid)).max())
    orders = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert np.all(orders >= 1.5), orders


@given(st.floats(-2, 2), st.floats(-1, 1), st.floats(-3, 3))
def test_derivatives_of_quadratics(a, b, c):
    g = SpaceTimeGrid(0.0, 1.0, 3, -2.0, 2.0, 16)
    x = g.x_nodes
    v = np.broadcast_to(a * x ** 2 + b * x + c, g.shape).copy()
    fld = gradient_and_hessian(DecouplingField(grid=g, v=v, v_x=v, v_xx=v))
    np.testing.assert_allclose(fld.v_x, np.broadcast_to(2 * a * x + b, g.shape), atol=1e-11)
    np.testing.assert_allclose(fld.v_xx, 2 * a, atol=1e-9)


def test_linear_field_derivatives():
    g = SpaceTimeGrid(0.0, 1.0, 2, -1.0, 1.0, 10)
    fld = DecouplingField(grid=g, v=np.broadcast_to(g.x_nodes, g.shape).copy())
    np.testing.assert_allclose(fld.v_x, 1.0, atol=1e-12)
    np.testing.assert_allclose(fld.v_xx, 0.0, atol=1e-9)


@given(st.floats(0.0, 1.0))
def test_comparison_principle(shift):
    m1 = builtin_worked_example()
    g = SpaceTimeGrid.around(m1, 40, 80, 5.0)
    m2 = inline(phi=[{"type": "sigmoid"}, {"type": "const", "value": shift}],
                f=[{"var": "y", "type": "poly", "coefficients": [0, 1]},
                   {"var": "z", "type": "poly", "coefficients": [0, 1]}])
    f1, f2 = solve_decoupling_field(m1, g), solve_decoupling_field(m2, g)
    assert comparison_fraction(f1, f2) == 1.0


def test_comparison_negative_control():
    m1 = builtin_worked_example()
    g = SpaceTimeGrid.around(m1, 40, 80, 5.0)
    m2 = inline(phi=[{"type": "sigmoid"}, {"type": "const", "value": -0.1}],
                f=[{"var": "y", "type": "poly", "coefficients": [0, 1]},
                   {"var": "z", "type": "poly", "coefficients": [0, 1]}])
    assert comparison_fraction(solve_decoupling_field(m1, g), solve_decoupling_field(m2, g)) < 1


def test_grid_mismatch():
    m = builtin_worked_example()
    with pytest.raises(GridMismatch):
        solve_decoupling_field(m, SpaceTimeGrid(0.0, 2.0, 10, -5, 5, 20))
    with pytest.raises(GridMismatch):
        solve_decoupling_field(m, SpaceTimeGrid(0.0, 1.0, 10, 1.0, 5.0, 20))
    with pytest.raises(GridMismatch):
        GridFunction(SpaceTimeGrid(0.0, 1.0, 2, 0.0, 1.0, 4), np.zeros((2, 2)))


def test_explicit_cfl():
    m = builtin_worked_example()
    g = SpaceTimeGrid.around(m, 10, 200, 6.0)
    with pytest.raises(CFLViolation):
        solve_decoupling_field(m, g, SolverConfig(scheme="explicit"))
    fine = SpaceTimeGrid.around(m, 2000, 100, 6.0)
    fld = solve_decoupling_field(m, fine, SolverConfig(scheme="explicit", pad=0.0))
    orc = worked_example_field(fine.t_nodes[:1], fine.x_nodes, sigmoid)
    assert abs(fld.v[0, 50] - orc[0, 50]) < 1e-3


def test_picard_diverges_on_stiff_driver():
    m = inline(phi=1.0, f=[{"var": "y", "type": "poly", "coefficients": [0, 60.0]}])
    g = SpaceTimeGrid.around(m, 2, 20, 3.0)
    with pytest.raises(PicardDiverged):
        solve_decoupling_field(m, g, SolverConfig(damping=1.0))


def test_transformed_drift():
    m = builtin_worked_example()
    g = SpaceTimeGrid.around(m, 10, 20, 4.0)
    assert transformed_drift(solve_decoupling_field(m, g), m).is_constant()
    rs = builtin_regime_switching(k1=0.3, k2=0.3, beta=2.0)
    g = SpaceTimeGrid.around(rs, 20, 40, 4.0)
    bt = transformed_drift(solve_decoupling_field(rs, g), rs)
    np.testing.assert_allclose(bt.values, np.broadcast_to(0.3 - 2.0 * g.x_nodes, g.shape))


@pytest.mark.filterwarnings("ignore:regime_switching. Picard tolerance")
def test_regime_switching_two_levels_per_slice():
    rs = builtin_regime_switching(k1=1.0, k2=-1.0, alpha=0.0, beta=1.0)
    g = SpaceTimeGrid.around(rs, 50, 100, 4.0)
    fld = solve_decoupling_field(rs, g)
    bt = transformed_drift(fld, rs).values
    shifted = bt + g.x_nodes  # remove the -beta x part
    for n in range(g.M + 1):
        levels = np.unique(np.round(shifted[n], 12))
        assert set(levels) <= {1.0, -1.0}


@given(st.floats(-2, 2).filter(lambda c: abs(c) > 1e-3), st.floats(0.2, 8.0))
def test_kolmogorov_constant_drift(c, mu):
    g = SpaceTimeGrid(0.0, 1.0, 200, -4.0, 4.0, 40)
    U, DU = solve_kolmogorov_U(np.full(g.shape, c), 1.0, mu, g)
    tau = g.T - g.t_nodes
    exact = c / mu * (1.0 - np.exp(-mu * tau))
    np.testing.assert_allclose(U, np.broadcast_to(exact[:, None], g.shape),
                               atol=2e-4 * abs(c) + 1e-12)
    assert np.abs(DU).max() <= 1e-8


def test_kolmogorov_zero_drift_and_bad_mu():
    g = SpaceTimeGrid(0.0, 1.0, 10, -1.0, 1.0, 10)
    U, DU = solve_kolmogorov_U(np.zeros(g.shape), 1.0, 1.0, g)
    assert not U.any() and not DU.any()
    with pytest.raises(ValueError):
        solve_kolmogorov_U(np.zeros(g.shape), 1.0, 0.0, g)


def test_gradient_bound_report():
    m = builtin_worked_example()
    g = SpaceTimeGrid.around(m, 40, 80, 5.0)
    rep = solve_decoupling_field(m, g, SolverConfig(gradient_bound=1.0)).iteration_report
    gb = rep["gradient_bound"]
    assert gb["pass"] and gb["weighted_sup"] <= 1.0
    assert 0.0 <= gb["best_fit_gamma"] <= 1.0
    assert math.isfinite(gb["weighted_sup"])
