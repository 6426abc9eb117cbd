import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fbsdelab import DegeneracyDetected, MuSearchFailed
from fbsdelab.oracles import constant_drift_U
from fbsdelab.pde import SpaceTimeGrid
from fbsdelab.zvonkin import (build_transform, correspondence_check, ks_critical,
                              transformed_coefficients)


def grid(M=100, J=160, half=6.0):
    return SpaceTimeGrid(0.0, 1.0, M, -half, half, J)


def step(c=1.0, R=0.0):
    return lambda t, x: np.where(x >= R, c, -c)


@given(st.floats(-1.5, 1.5).filter(lambda v: abs(v) > 1e-2))
@settings(max_examples=10)
def test_constant_drift_closed_form(c):
    g = grid(200, 40, 4.0)
    tr = build_transform(c, 1.0, g)
    exact = constant_drift_U(c, tr.mu, g.T - g.t_nodes)
    np.testing.assert_allclose(tr.U[:, 20], exact, atol=2e-4 * abs(c))
    assert tr.sup_DU <= 1e-8
    z = tr.psi(0.0, np.array([-1.0, 0.0, 1.0]))
    np.testing.assert_allclose(z, np.array([-1.0, 0.0, 1.0]) + exact[0], atol=2e-4 * abs(c))
    np.testing.assert_allclose(tr.psi_inverse(0.0, z), [-1.0, 0.0, 1.0], atol=1e-10)


def test_zero_drift_is_identity():
    tr = build_transform(0.0, 1.0, grid(10, 20))
    assert tr.is_identity and tr.sup_DU == 0.0 and tr.mu == 1.0
    assert tr.psi_inverse(0.3, 1.25) == 1.25
    co = transformed_coefficients(tr)
    assert not np.any(co.b1.values)
    np.testing.assert_array_equal(co.sigma1.values, 1.0)


def test_mu_search_reaches_half_bound():
    tr = build_transform(step(2.0), 1.0, grid(), mu_initial=0.25)
    assert tr.sup_DU <= 0.5
    hist = np.array(tr.mu_history)
    assert hist[-1, 0] == tr.mu and np.all(hist[1:, 0] == 2 * hist[:-1, 0])
    assert np.all(hist[:-1, 1] > 0.5)
    dpsi = tr.d_psi(0.0, grid().x_nodes)
    assert np.all(dpsi >= 0.5)
    assert tr.round_trip_error() <= 1e-10
    assert tr.summary()["mu"] == tr.mu


def test_mu_search_failure():
    with pytest.raises(MuSearchFailed):
        build_transform(step(5.0), 1.0, grid(), mu_initial=0.01, max_doublings=1)


def test_transformed_coefficients_structure():
    g = grid()
    tr = build_transform(step(1.0), 1.0, g)
    co = transformed_coefficients(tr)
    tt, zz = np.meshgrid(g.t_nodes, g.x_nodes, indexing="ij")
    xinv = tr.psi_inverse(tt, zz)
    np.testing.assert_allclose(co.sigma1.values, 1.0 + tr.DU_fn(tt, xinv), atol=1e-12)
    np.testing.assert_allclose(co.b1.values, tr.mu * tr.U_fn(tt, xinv), atol=1e-12)
    assert co.min_sigma1_sq >= 0.25 and co.quarter_bound_ok
    with pytest.raises(DegeneracyDetected):
        transformed_coefficients(tr, lam=100.0)


def test_ks_critical():
    assert ks_critical(100, 100) == pytest.approx(1.628 * math.sqrt(0.02))
    assert ks_critical(10_000, 40_000) < ks_critical(100, 400)


@pytest.mark.filterwarnings("ignore:ks_2samp. Exact calculation")
def test_correspondence_constant_drift():
    g = grid(200, 200)
    c = 0.7
    tr = build_transform(c, 1.0, g)
    co = transformed_coefficients(tr)
    gaps = []
    for M in (50, 200):
        mc = SpaceTimeGrid(0.0, 1.0, M, -6.0, 6.0, 16)
        rep = correspondence_check(c, 1.0, 0.0, tr, co, mc, 4000, 5)
        assert rep["ks_pass"]
        gaps.append(rep["pathwise_rms_sup"])
    # the gap is the Euler quadrature error of int mu U dt, first order in dt
    assert math.log(gaps[0] / gaps[1], 4) >= 0.9


def test_correspondence_step_drift_distribution():
    g = grid(200, 300)
    tr = build_transform(step(0.8, 0.2), 1.0, g)
    co = transformed_coefficients(tr)
    mc = SpaceTimeGrid(0.0, 1.0, 256, -6.0, 6.0, 16)
    rep = correspondence_check(step(0.8, 0.2), 1.0, 0.0, tr, co, mc, 10_000, 6, record="final")
    assert rep["ks_pass"], rep["ks_statistic"]
