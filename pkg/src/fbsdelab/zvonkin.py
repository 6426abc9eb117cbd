"""Zvonkin phase-space transform Psi = id + U.

U solves the backward Kolmogorov equation

    U_t + 1/2 sigma^2 U_xx + b~ U_x - mu U = -b~,    U(T, .) = 0,

with mu doubled until sup |DU| <= 1/2, so every slice of Psi is strictly
increasing with D Psi >= 1/2.  Under Psi the forward equation becomes
dX~ = b~_1(t, X~) dt + sigma~_1(t, X~) dW with

    b~_1(t, z) = mu U(t, Psi^{-1}(t, z)),
    sigma~_1(t, z) = (1 + DU) sigma evaluated at (t, Psi^{-1}(t, z)),

and X_t = Psi^{-1}(t, X~_t) pathwise.
"""

import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit
from scipy.stats import ks_2samp

from ._interp import table_eval
from .exceptions import DegeneracyDetected, MuSearchFailed
from .pde import GridFunction, SolverConfig, SpaceTimeGrid, solve_kolmogorov_U
from .sde import as_coef, simulate_forward

KS_C_1PCT = 1.628


@njit(cache=True, nogil=True)
def _invert_kernel(vals, slopes, t0, dt, x0, dx, t, z, pad, tol, out):
    # bisection on x + U(t, x) = z; U is bounded by pad so the root is in [z - pad, z + pad]
    for i in range(z.shape[0]):
        lo = z[i] - pad
        hi = z[i] + pad
        ti = t[i]
        while hi - lo > tol:
            mid = 0.5 * (lo + hi)
            if mid + table_eval(vals, slopes, t0, dt, x0, dx, ti, mid) < z[i]:
                lo = mid
            else:
                hi = mid
        out[i] = 0.5 * (lo + hi)
    return out


@dataclass
class ZvonkinTransform:
    """Solved transform: U and DU tables, the chosen mu and the audit record."""

    grid: SpaceTimeGrid
    mu: float
    U: np.ndarray
    DU: np.ndarray
    sigma: object
    mu_history: list = field(default_factory=list)

    def __post_init__(self):
        self.U_fn = GridFunction(self.grid, self.U)
        self.DU_fn = GridFunction(self.grid, self.DU)

    @property
    def sup_DU(self):
        return float(np.max(np.abs(self.DU)))

    @property
    def is_identity(self):
        return not np.any(self.U)

    def psi(self, t, x):
        return np.asarray(x, float) + self.U_fn(t, x)

    def d_psi(self, t, x):
        return 1.0 + self.DU_fn(t, x)

    def psi_inverse(self, t, z, tol=1e-12):
        """Slice-wise inverse of Psi by bisection to ``tol``."""
        t, z = np.broadcast_arrays(np.asarray(t, float), np.asarray(z, float))
        if self.is_identity:
            return z.copy() if z.shape else float(z)
        tf = np.ascontiguousarray(t.ravel())
        zf = np.ascontiguousarray(z.ravel())
        out = np.empty(zf.shape[0])
        pad = float(np.max(np.abs(self.U))) + 1.0
        _invert_kernel(*self.U_fn.table, tf, zf, pad, float(tol), out)
        return out.reshape(z.shape) if z.shape else float(out[0])

    def round_trip_error(self):
        g = self.grid
        tt, xx = np.meshgrid(g.t_nodes, g.x_nodes, indexing="ij")
        return float(np.max(np.abs(self.psi_inverse(tt, self.psi(tt, xx)) - xx)))

    def summary(self):
        return {"mu": self.mu, "sup_DU": self.sup_DU, "mu_history": list(self.mu_history),
                "grid": self.grid.to_dict()}


def build_transform(b_tilde, sigma, grid, mu_initial=1.0, max_doublings=20, cfg=None):
    """Solve for U with mu doubled from ``mu_initial`` until sup |DU| <= 1/2.

    Raises
    ------
    MuSearchFailed
        If ``max_doublings`` doublings do not reach the bound.
    """
    if isinstance(b_tilde, GridFunction):
        bvals = b_tilde.values
    elif callable(b_tilde):
        tt, xx = np.meshgrid(grid.t_nodes, grid.x_nodes, indexing="ij")
        bvals = np.broadcast_to(np.asarray(b_tilde(tt, xx), float), grid.shape)
    else:
        bvals = np.broadcast_to(np.asarray(b_tilde, float), grid.shape)
    mu = float(mu_initial)
    history = []
    cfg = cfg or SolverConfig()
    for _ in range(max_doublings + 1):
        U, DU = solve_kolmogorov_U(bvals, sigma, mu, grid, cfg)
        sup = float(np.max(np.abs(DU)))
        history.append([mu, sup])
        if sup <= 0.5:
            return ZvonkinTransform(grid, mu, U, DU, sigma, history)
        mu *= 2.0
    raise MuSearchFailed(f"sup|DU| = {sup:.3g} > 1/2 after {max_doublings} doublings "
                         f"(mu = {mu / 2:.3g})")


@dataclass
class TransformedCoefficients:
    b1: GridFunction
    sigma1: GridFunction
    min_sigma1_sq: float
    lam: float
    quarter_bound_ok: bool
    half_lambda_bound_ok: bool

    def summary(self):
        return {"min_sigma1_sq": self.min_sigma1_sq, "lambda": self.lam,
                "quarter_lambda_bound_ok": self.quarter_bound_ok,
                "half_lambda_bound_ok": self.half_lambda_bound_ok}


def transformed_coefficients(transform, sigma=None, lam=None):
    """Tabulate b~_1 and sigma~_1 on the transform grid (z-nodes = x-nodes).

    ``lam`` is the ellipticity constant (default: min sigma^2 on the grid).
    The guaranteed bound sigma~_1^2 >= lam/4 follows from |DU| <= 1/2 and a
    violation raises; the sharper lam/2 audit is reported.

    Raises
    ------
    DegeneracyDetected
        If min sigma~_1^2 < lam/4.
    """
    g = transform.grid
    sig = as_coef(transform.sigma if sigma is None else sigma, 1.0)
    tt, zz = np.meshgrid(g.t_nodes, g.x_nodes, indexing="ij")
    xinv = transform.psi_inverse(tt, zz)
    b1 = transform.mu * transform.U_fn(tt, xinv)
    s_at = np.empty(g.shape)
    s_grid = np.empty(g.shape)
    for n, tn in enumerate(g.t_nodes):
        s_at[n] = sig(float(tn), xinv[n])
        s_grid[n] = sig(float(tn), g.x_nodes)
    s1 = (1.0 + transform.DU_fn(tt, xinv)) * s_at
    lam = float(np.min(s_grid ** 2)) if lam is None else float(lam)
    m = float(np.min(s1 ** 2))
    if m < 0.25 * lam * (1.0 - 1e-12):
        raise DegeneracyDetected(f"min sigma1^2 = {m:.3g} below lambda/4 = {lam / 4:.3g}")
    return TransformedCoefficients(GridFunction(g, b1), GridFunction(g, s1), m, lam,
                                   True, bool(m >= 0.5 * lam))


def ks_critical(n, m, c=KS_C_1PCT):
    """Asymptotic two-sample KS critical value at the 1% level."""
    return c * math.sqrt((n + m) / (n * m))


def correspondence_check(b_tilde, sigma, x0, transform, coeffs, mc_grid, n_paths, seed,
                         stream=0, threads=1, record="all", noise_substeps=1):
    """Simulate X and X~ on the same noise and compare X with Psi^{-1}(t, X~).

    Returns the sup over recorded times (``record`` as in
    :func:`~fbsdelab.sde.simulate_forward`) of the RMS pathwise gap, the KS
    statistic of X_T against Psi^{-1}(T, X~_T), and its 1% critical value.
    """
    z0 = float(transform.psi(mc_grid.t0, x0))
    kw = dict(stream=stream, threads=threads, record=record, noise_substeps=noise_substeps)
    ex = simulate_forward(b_tilde, sigma, x0, mc_grid, n_paths, seed, **kw)
    ez = simulate_forward(coeffs.b1, coeffs.sigma1, z0, mc_grid, n_paths, seed, **kw)
    t = ex.t_rec
    back = transform.psi_inverse(np.broadcast_to(t, ez.X.shape), ez.X)
    gap = ex.X - back
    rms = np.sqrt(np.mean(gap ** 2, axis=0))
    ks = ks_2samp(ex.X_T, back[:, -1])
    crit = ks_critical(n_paths, n_paths)
    return {"pathwise_rms_sup": float(rms.max()), "pathwise_rms": rms,
            "ks_statistic": float(ks.statistic), "ks_pvalue": float(ks.pvalue),
            "ks_critical_1pct": crit, "ks_pass": bool(ks.statistic < crit),
            "n_paths": int(n_paths), "n_steps": int(mc_grid.M), "seed": int(seed),
            "mu": transform.mu, "sup_DU": transform.sup_DU, "X": ex, "X_tilde": ez}


def _slice_gradient(values, dx):
    return np.gradient(values, dx, axis=1, edge_order=2)


def mal57_crosscheck(transform, coeffs, ens_x, ens_z, fld_dX):
    """Compare D_0 X_T from the transformed representation with a direct one.

    The transformed route is
    D_0 X_T = sigma~_1(0, X~_0) exp(int g~(r, X~_r) dr) / D Psi(T, X_T)
    with g~ = d_z b~_1 - (b~_1 d_z sigma~_1 + d_t sigma~_1) / sigma~_1
    - 1/2 sigma~_1 d_zz sigma~_1.  ``fld_dX`` holds direct D_0 X_T per path.
    Discrepancies are reported, not resolved.
    """
    g = transform.grid
    b1 = coeffs.b1.values
    s1 = coeffs.sigma1.values
    s1z = _slice_gradient(s1, g.dx)
    s1zz = _slice_gradient(s1z, g.dx)
    s1t = np.gradient(s1, g.dt, axis=0, edge_order=2) if g.M >= 2 else np.zeros(g.shape)
    gt = _slice_gradient(b1, g.dx) - (b1 * s1z + s1t) / s1 - 0.5 * s1 * s1zz
    G = GridFunction(g, gt)
    t = ens_z.t_nodes
    acc = np.zeros(ens_z.n_paths)
    Z0 = None
    XT = None
    for start, (Zp, _) in ens_z.iter_blocks():
        sl = slice(start, start + Zp.shape[0])
        a = np.zeros(Zp.shape[0])
        for m in range(ens_z.n_steps):
            a += G(t[m], Zp[:, m])
        acc[sl] = a * ens_z.dt
    Z0 = ens_z.x0
    XT = ens_x.X_T
    via = coeffs.sigma1(t[0], Z0) * np.exp(acc) / transform.d_psi(t[-1], XT)
    direct = np.asarray(fld_dX, float)
    rel = abs(via.mean() - direct.mean()) / max(abs(direct.mean()), 1e-300)
    return {"transformed_mean": float(via.mean()), "direct_mean": float(direct.mean()),
            "relative_gap": float(rel), "per_path": via}


def density_transfer_check(transform, x_samples, z_samples, t, probe=None, bootstrap=20):
    """Compare KDE(X_t) with D Psi(t, .) KDE(X~_t)(Psi(t, .)) on a probe grid."""
    from .density import GaussianKDE
    kx = GaussianKDE(bootstrap=bootstrap).fit(x_samples)
    kz = GaussianKDE(bootstrap=bootstrap).fit(z_samples)
    if probe is None:
        lo, hi = np.quantile(x_samples, [0.05, 0.95])
        probe = np.linspace(lo, hi, 101)
    rho_x = kx.score_samples(probe)
    rho_t = transform.d_psi(t, probe) * kz.score_samples(transform.psi(t, probe))
    rel = np.abs(rho_t - rho_x) / rho_x
    return {"max_relative_deviation": float(rel.max()), "t": float(t),
            "probe": probe, "kde_x": rho_x, "transferred": rho_t}
