import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fbsdelab import MissingDerivatives, NotBrownian
from fbsdelab.local_time import (default_epsilon, exponential_moment_check, integrated_derivative,
                                 level_local_time, sobolev_flow_derivative,
                                 spacetime_local_time_integral)
from fbsdelab.malliavin import finite_difference_flow
from fbsdelab.oracles import brownian_local_time_mean
from fbsdelab.pde import SpaceTimeGrid
from fbsdelab.sde import simulate_forward


def grid(M, T=1.0, half=8.0):
    return SpaceTimeGrid(0.0, T, M, -half, half, 16)


@pytest.fixture(scope="module")
def brownian():
    return simulate_forward(None, 1.0, 0.0, grid(256), 20_000, 21, record="final")


def test_oracle_matches_reflection_quadrature():
    # E L_T^0 = E|W_T| by Tanaka, computed here by quadrature of the half-normal
    from scipy.integrate import quad
    from scipy.stats import norm
    T = 1.7
    val, _ = quad(lambda z: abs(z) * norm.pdf(z, scale=math.sqrt(T)), -np.inf, np.inf)
    assert brownian_local_time_mean(T) == pytest.approx(val, rel=1e-10)
    assert brownian_local_time_mean(1.0) == pytest.approx(0.7978845608, rel=1e-9)


def test_level_local_time_away_from_level():
    paths = np.tile(np.linspace(0.0, 0.5, 65), (3, 1))
    r = level_local_time(paths, 2.0, 1.0 / 64)
    assert np.all(r.values == 0.0)
    assert r.params["epsilon"] == default_epsilon(1.0 / 64)
    with pytest.raises(ValueError):
        level_local_time(paths, 0.0, 1.0 / 64, epsilon=0.0)


def test_level_local_time_brownian_mean_and_stability():
    e = simulate_forward(None, 1.0, 0.0, grid(2048), 4000, 22)
    dt = e.dt
    r = level_local_time(e.X, 0.0, dt)
    assert np.all(r.values >= 0.0)
    assert abs(r.value - brownian_local_time_mean(1.0)) <= 4 * r.stderr
    half = level_local_time(e.X, 0.0, dt, epsilon=r.params["epsilon"] / 2)
    assert abs(half.value - r.value) <= 2 * r.stderr


def test_level_local_time_scales_with_sigma_squared():
    paths = np.zeros((2, 11))
    a = level_local_time(paths, 0.0, 0.1, epsilon=0.5)
    b = level_local_time(paths, 0.0, 0.1, epsilon=0.5, sigma=2.0)
    np.testing.assert_allclose(b.values, 4.0 * a.values)


def test_decomposition_constant_and_linear(brownian):
    const = spacetime_local_time_integral(lambda t, x: 0.7 + 0.0 * x, brownian)
    assert const.estimator == "decomposition"
    assert abs(const.value) <= 4 * const.stderr
    lin = spacetime_local_time_integral(lambda t, x: x, brownian)
    assert abs(lin.value + 1.0) <= 4 * lin.stderr


def test_decomposition_quadratic_pathwise(brownian):
    vals = spacetime_local_time_integral(lambda t, x: x * x, brownian).values
    target = integrated_derivative(lambda t, x: 2.0 * x, brownian)
    assert np.sqrt(np.mean((vals - target) ** 2)) <= 5 * math.sqrt(brownian.dt)


def test_decomposition_self_consistency_refines():
    rms = []
    for M in (64, 256):
        e = simulate_forward(None, 1.0, 0.0, grid(M), 4000, 23, record="final",
                             noise_substeps=256 // M)
        vals = spacetime_local_time_integral(lambda t, x: np.sin(x), e).values
        target = integrated_derivative(lambda t, x: np.cos(x), e)
        rms.append(np.sqrt(np.mean((vals - target) ** 2)))
    assert rms[1] < rms[0]


def test_decomposition_rejects_drift():
    e = simulate_forward(0.3, 1.0, 0.0, grid(16), 10, 1)
    with pytest.raises(NotBrownian):
        spacetime_local_time_integral(lambda t, x: x, e)


def test_exponential_moment_trivial(brownian):
    assert exponential_moment_check(0.0, 1.0, brownian)["estimate"] == 1.0
    assert exponential_moment_check(lambda t, x: np.tanh(x), 0.0, brownian)["estimate"] == 1.0


@given(st.floats(-2.0, 2.0).filter(lambda v: abs(v) > 0.05))
@settings(max_examples=5)
def test_exponential_moment_bound(lam):
    e = simulate_forward(None, 1.0, 0.0, grid(128), 4000, 24, record="final")
    rep = exponential_moment_check(lambda t, x: np.sin(x), lam, e)
    assert rep["finite"]
    # sup |d_x sin| = 1
    assert rep["estimate"] <= math.exp(abs(lam)) * (1.0 + 5 * rep["stderr"])


def test_exponential_moment_stable_under_doubling():
    est = []
    for n in (4000, 8000):
        e = simulate_forward(None, 1.0, 0.0, grid(128), n, 25, record="final")
        est.append(exponential_moment_check(lambda t, x: 0.5 * np.sign(x), 1.0, e))
    se = math.hypot(est[0]["stderr"], est[1]["stderr"])
    assert abs(est[0]["estimate"] - est[1]["estimate"]) <= 4 * se


def test_flow_derivative_trivial_and_missing(brownian):
    assert np.all(sobolev_flow_derivative(brownian, 0.0) == 1.0)
    xi, w = sobolev_flow_derivative(brownian, 0.0, route="decomposition")
    assert np.all(xi == 1.0) and np.all(w == 1.0)
    with pytest.raises(MissingDerivatives):
        sobolev_flow_derivative(brownian, lambda t, x: np.tanh(x))
    with pytest.raises(NotBrownian):
        sobolev_flow_derivative(simulate_forward(0.2, 1.0, 0.0, grid(8), 5, 1), 0.2,
                                route="decomposition")
    with pytest.raises(ValueError):
        sobolev_flow_derivative(brownian, 0.0, route="other")


def test_flow_routes_agree_for_smooth_drift(brownian):
    b = lambda t, x: 0.5 * np.sin(x)  # noqa: E731
    smooth = sobolev_flow_derivative(brownian, b, b_x=lambda t, x: 0.5 * np.cos(x))
    decomp, _ = sobolev_flow_derivative(brownian, b, route="decomposition")
    assert np.all(smooth > 0) and np.all(decomp > 0)
    assert np.sqrt(np.mean((smooth - decomp) ** 2)) <= 5 * math.sqrt(brownian.dt)


def test_flow_derivative_step_drift_matches_finite_differences():
    c, R, n = 0.8, 0.3, 40_000
    g = grid(256)

    def b(t, x):
        return np.where(x >= R, c, 0.0)

    e = simulate_forward(None, 1.0, 0.0, g, n, 26, record="final")
    xi, w = sobolev_flow_derivative(e, b, route="decomposition")
    vals = xi * w
    est, se = vals.mean(), vals.std(ddof=1) / math.sqrt(n)

    def endpoint(x):
        return simulate_forward(b, 1.0, x, g, n, 27, record="final").X_T

    fd = finite_difference_flow(endpoint, 0.0, 1e-3)
    fd_se = fd.std(ddof=1) / math.sqrt(n)
    assert abs(est - fd.mean()) <= 4 * math.hypot(se, fd_se)
