"""Local-time estimators for Brownian and diffusion paths.

Space-time local-time integrals of a bounded phi use the time-reversal
decomposition for W^x = x + W on [0, T]:

    int int phi(s, z) L(ds, dz) = int_0^T phi(s, W^x_s) dW_s
                                  + int_0^T phi(T - s, W^x_{T-s}) dB_s
                                  - int_0^T phi(T - s, W^x_{T-s}) W_{T-s} / (T - s) ds,

with B the Brownian motion of the reversed path.  For smooth phi the left side
equals -int_0^T d_x phi(s, W^x_s) ds.  On the last interval, where the
kernel W_{T-s} / (T - s) is singular, T - s is capped at dt in both reversed
sums.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .exceptions import MissingDerivatives, NotBrownian
from .sde import BLOCK, _reverse_block, as_coef, girsanov_weight


@dataclass
class LocalTimeResult:
    """Per-path values of a local-time functional and their ensemble summary."""

    values: np.ndarray
    estimator: str
    params: dict = field(default_factory=dict)

    @property
    def value(self):
        return float(np.mean(self.values))

    @property
    def stderr(self):
        n = len(self.values)
        return float(np.std(self.values, ddof=1) / math.sqrt(n)) if n > 1 else 0.0

    def summary(self):
        out = {"estimator": self.estimator, "mean": self.value, "stderr": self.stderr,
               "n_paths": int(len(self.values))}
        out.update(self.params)
        return out


def default_epsilon(dt):
    """Occupation half-width dt^0.4."""
    return float(dt) ** 0.4


def level_local_time(paths, level, dt, epsilon=None, sigma=1.0, t_nodes=None):
    """Occupation estimate (1/2 eps) sum_m 1{|X_m - R| < eps} sigma^2(t_m, X_m) dt.

    Parameters
    ----------
    paths : ndarray (n_paths, M + 1) or (M + 1,)
        Sampled paths on a uniform grid of step ``dt``.  The terminal node is
        not counted (left-point sum).
    """
    X = np.atleast_2d(np.asarray(paths, float))
    eps = default_epsilon(dt) if epsilon is None else float(epsilon)
    if eps <= 0.0:
        raise ValueError("epsilon must be positive")
    Xl = X[:, :-1]
    hit = np.abs(Xl - level) < eps
    sig = as_coef(sigma, 1.0)
    if sig.is_const(1.0):
        w = hit.astype(float)
    else:
        t = np.arange(Xl.shape[1]) * dt if t_nodes is None else np.asarray(t_nodes)[:-1]
        w = np.zeros_like(Xl)
        for m in range(Xl.shape[1]):
            w[:, m] = hit[:, m] * sig(t[m], Xl[:, m]) ** 2
    vals = w.sum(axis=1) * dt / (2.0 * eps)
    return LocalTimeResult(vals, "occupation", {"epsilon": eps, "level": float(level),
                                                "dt": float(dt)})


def _phi_eval(phi, t, x):
    return np.broadcast_to(np.asarray(phi(t, x), float), np.shape(x))


def decomposition_block(phi, X, x0, t_nodes):
    """The three decomposition sums for a block of Brownian paths X = x0 + W.

    Returns per-path values and the capped last correction term, whose size
    bounds the effect of the cap (for the bias report).
    """
    rev = _reverse_block(X, x0, t_nodes)
    T = t_nodes[-1]
    s = t_nodes - t_nodes[0]
    dt = s[1] - s[0]
    horizon = T - t_nodes[0]
    M = X.shape[1] - 1
    dW = np.diff(X, axis=1)
    fwd = np.zeros(X.shape[0])
    back = np.zeros(X.shape[0])
    corr = np.zeros(X.shape[0])
    for m in range(M):
        fwd += _phi_eval(phi, t_nodes[m], X[:, m]) * dW[:, m]
    for m in range(M):
        # the kernel is capped at s = T - dt in dB and in the correction alike,
        # so the singular parts cancel term by term
        tau = max(horizon - s[m], dt)
        ph = _phi_eval(phi, t_nodes[0] + tau, rev.Wx_hat[:, m])
        back += ph * rev.dB[:, m]
        corr += ph * rev.W_hat[:, m] * dt / tau
    dropped = _phi_eval(phi, t_nodes[0] + dt, rev.Wx_hat[:, M - 1]) * rev.W_hat[:, M - 1]
    return fwd + back - corr, dropped


def spacetime_local_time_integral(phi, ensemble, block=BLOCK):
    """Per-path values of int int phi(s, z) L^{W^x}(ds, dz) by the reversal decomposition.

    Raises
    ------
    NotBrownian
        If the ensemble carries a drift or a non-unit diffusion.
    """
    if not ensemble.is_brownian():
        raise NotBrownian("the decomposition is stated for Brownian paths")
    out = np.empty(ensemble.n_paths)
    capped_abs = 0.0
    t = ensemble.t_nodes
    for start in range(0, ensemble.n_paths, block):
        count = min(block, ensemble.n_paths - start)
        X, _ = ensemble.replay(start, count)
        vals, dropped = decomposition_block(phi, X, ensemble.x0[start:start + count], t)
        out[start:start + count] = vals
        capped_abs += float(np.abs(dropped).sum())
    dt = ensemble.dt
    sup_phi = _sup_abs_phi(phi, ensemble)
    return LocalTimeResult(out, "decomposition", {
        "dt": float(dt), "capped_mean_abs": capped_abs / ensemble.n_paths,
        "bias_bound": float(sup_phi * math.sqrt(2.0 * dt / math.pi)), "sup_phi": sup_phi})


def _sup_abs_phi(phi, ensemble):
    # sup |phi| over the final-interval states, used only for the bias report
    X, _ = ensemble.replay(0, min(ensemble.n_paths, 4096))
    return float(np.max(np.abs(_phi_eval(phi, ensemble.t_nodes[0] + ensemble.dt, X[:, 1]))))


def integrated_derivative(dphi, ensemble, block=BLOCK):
    """Per-path left-point sum of -d_x phi(t_m, W^x_m) dt (the smooth-phi target)."""
    out = np.empty(ensemble.n_paths)
    t = ensemble.t_nodes
    for start, (X, _) in ensemble.iter_blocks(block):
        acc = np.zeros(X.shape[0])
        for m in range(ensemble.n_steps):
            acc += _phi_eval(dphi, t[m], X[:, m])
        out[start:start + X.shape[0]] = -acc * ensemble.dt
    return out


def exponential_moment_check(b, lam, ensemble, block=BLOCK):
    """Monte Carlo estimate of E exp(lam int int b L) with the decomposition values."""
    bc = as_coef(b, 0.0)
    if lam == 0.0 or bc.is_zero:
        return {"estimate": 1.0, "stderr": 0.0, "max_exponent": 0.0,
                "n_paths": int(ensemble.n_paths), "lambda": float(lam)}
    vals = spacetime_local_time_integral(bc, ensemble, block).values
    e = np.exp(lam * vals)
    return {"estimate": float(e.mean()), "stderr": float(e.std(ddof=1) / math.sqrt(len(e))),
            "max_exponent": float(np.max(lam * vals)), "n_paths": int(ensemble.n_paths),
            "lambda": float(lam), "finite": bool(np.all(np.isfinite(e)))}


def sobolev_flow_derivative(ensemble, b_tilde, route="smooth", b_x=None, block=BLOCK):
    """Spatial flow derivative xi_T = exp(-int int b~ L^X(du, dz)).

    ``route="smooth"`` returns exp(sum_m d_x b~(t_m, X_m) dt) on the given
    paths and needs ``b_x``.  ``route="decomposition"`` requires a Brownian
    ensemble and returns the tuple (xi, weights) where the Girsanov weights
    transfer expectations to the drifted law: E[g(X)] = E[g(W^x) weight].

    Raises
    ------
    MissingDerivatives
        Smooth route without ``b_x``.
    NotBrownian
        Decomposition route on a drifted ensemble.
    """
    if route == "smooth":
        bc = as_coef(b_tilde, 0.0)
        if bc.is_zero:
            return np.ones(ensemble.n_paths)
        if b_x is None:
            if bc.kind == "affine":
                b_x = bc.c
            else:
                raise MissingDerivatives("the smooth route needs d_x b~")
        dbx = as_coef(b_x, 0.0)
        out = np.empty(ensemble.n_paths)
        t = ensemble.t_nodes
        for start, (X, _) in ensemble.iter_blocks(block):
            acc = np.zeros(X.shape[0])
            for m in range(ensemble.n_steps):
                acc += dbx(t[m], X[:, m])
            out[start:start + X.shape[0]] = np.exp(acc * ensemble.dt)
        return out
    if route == "decomposition":
        bc = as_coef(b_tilde, 0.0)
        if not ensemble.is_brownian():
            raise NotBrownian("pathwise evaluation on drifted paths is unsupported; "
                              "use a Brownian ensemble with Girsanov weights")
        if bc.is_zero:
            return np.ones(ensemble.n_paths), np.ones(ensemble.n_paths)
        vals = spacetime_local_time_integral(bc, ensemble, block).values
        return np.exp(-vals), girsanov_weight(ensemble, bc, block)
    raise ValueError(f"unknown route {route!r}")
