"""Closed-form and quadrature references used by the experiment checks."""

import math

import numpy as np
from numpy.polynomial.hermite_e import hermegauss
from scipy.stats import norm

N_HERMITE = 80


def gauss_expectation(fn, mean, sd, n=N_HERMITE):
    """E[fn(mean + sd N)] for N standard normal by Gauss-Hermite quadrature.

    ``mean`` and ``sd`` broadcast against each other; the result has their
    broadcast shape.
    """
    z, w = hermegauss(n)
    w = w / w.sum()
    mean = np.asarray(mean, float)[..., None]
    sd = np.asarray(sd, float)[..., None]
    return np.sum(fn(mean + sd * z) * w, axis=-1)


def worked_example_field(t_nodes, x_nodes, phi, T=1.0):
    """e^{T-t} E[phi(x + (T - t) + W_{T-t})] on the (t, x) mesh."""
    tau = (T - np.asarray(t_nodes, float))[:, None]
    x = np.asarray(x_nodes, float)[None, :]
    return np.exp(tau) * gauss_expectation(phi, x + tau, np.sqrt(tau))


def heat_field(t_nodes, x_nodes, phi, T=1.0, drift=0.0, sigma=1.0):
    """E[phi(x + drift (T - t) + sigma W_{T-t})] on the (t, x) mesh."""
    tau = (T - np.asarray(t_nodes, float))[:, None]
    x = np.asarray(x_nodes, float)[None, :]
    return gauss_expectation(phi, x + drift * tau, sigma * np.sqrt(tau))


def call_expectation(mean, sd, strike):
    """E[(G - strike)^+] for G ~ N(mean, sd^2); sd = 0 gives the intrinsic value."""
    mean = np.asarray(mean, float)
    sd = np.asarray(sd, float)
    safe = np.where(sd > 0.0, sd, 1.0)
    d = (mean - strike) / safe
    val = (mean - strike) * norm.cdf(d) + safe * norm.pdf(d)
    return np.where(sd > 0.0, val, np.maximum(mean - strike, 0.0))


def ramp_expectation(mean, sd, strike, width):
    """E[clip((G - strike) / width, 0, 1)] for G ~ N(mean, sd^2), in closed form."""
    return (call_expectation(mean, sd, strike) - call_expectation(mean, sd, strike + width)) / width


def ou_moments(x0, beta, t, sigma=1.0):
    """Mean and variance of dX = -beta X dt + sigma dW at time t."""
    if beta == 0.0:
        return x0, sigma * sigma * t
    return x0 * math.exp(-beta * t), sigma * sigma * (1.0 - math.exp(-2.0 * beta * t)) / (2.0 * beta)


def brownian_local_time_mean(T):
    """E L_T^0 for Brownian motion started at the level: sqrt(2T/pi)."""
    return math.sqrt(2.0 * T / math.pi)


def constant_drift_U(c, mu, tau):
    """U = (c/mu)(1 - e^{-mu tau}) for the constant-drift Kolmogorov problem."""
    return (c / mu) * (1.0 - np.exp(-mu * np.asarray(tau, float)))
