"""Frozen reference values, computed once with 30-digit adaptive quadrature (mpmath)."""

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fbsdelab.models import sigmoid
from fbsdelab.oracles import (brownian_local_time_mean, call_expectation, constant_drift_U,
                              gauss_expectation, heat_field, ou_moments, ramp_expectation,
                              worked_example_field)

# e E[sigmoid(1 + W_1)]
WORKED_V00 = 1.89392119310898116193596207745
# E[sigmoid(0.7 + W_{1/2})]
HEAT_SIGMOID = 0.652611531819641924214838250652
# E[clip(G / 0.5, 0, 1)], G ~ N(-0.095, 0.3^2)
RAMP = 0.150941115730747701695870788133
# E[(G - 0.3)^+], G ~ N(0.1, 0.8^2)
CALL = 0.22907575857886413425554736026
SQRT_2_OVER_PI = 0.797884560802865355879892119869


def test_worked_example_value():
    v = worked_example_field([0.0], [0.0], sigmoid)
    assert v[0, 0] == pytest.approx(WORKED_V00, rel=1e-12)


def test_heat_value():
    assert heat_field([0.5], [0.7], sigmoid)[0, 0] == pytest.approx(HEAT_SIGMOID, rel=1e-12)


def test_call_and_ramp():
    assert float(call_expectation(0.1, 0.8, 0.3)) == pytest.approx(CALL, rel=1e-12)
    assert float(ramp_expectation(-0.095, 0.3, 0.0, 0.5)) == pytest.approx(RAMP, rel=1e-12)
    assert float(call_expectation(0.5, 0.0, 0.3)) == pytest.approx(0.2)


def test_local_time_mean():
    assert brownian_local_time_mean(1.0) == pytest.approx(SQRT_2_OVER_PI, rel=1e-15)


@given(st.floats(-3, 3), st.floats(0.05, 3), st.floats(-3, 3))
def test_call_matches_hermite(mean, sd, strike):
    gh = gauss_expectation(lambda x: np.maximum(x - strike, 0.0), mean, sd, n=200)
    # the kink limits Gauss-Hermite accuracy
    assert float(call_expectation(mean, sd, strike)) == pytest.approx(float(gh), abs=2e-3 * sd)


def test_ou_and_constant_drift():
    m, v = ou_moments(1.0, 2.0, 0.5)
    assert (m, v) == pytest.approx((math.exp(-1.0), (1 - math.exp(-2.0)) / 4.0))
    assert ou_moments(1.0, 0.0, 0.5) == (1.0, 0.5)
    # U solves U' = mu U - c backwards from U(T) = 0
    tau = np.linspace(0, 1, 5)
    U = constant_drift_U(0.7, 2.0, tau)
    h = 1e-6
    dU = (constant_drift_U(0.7, 2.0, tau + h) - constant_drift_U(0.7, 2.0, tau - h)) / (2 * h)
    np.testing.assert_allclose(dU, 0.7 - 2.0 * U, atol=1e-8)
