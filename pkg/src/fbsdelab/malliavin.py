"""Explicit Malliavin derivatives along simulated paths.

First order (scalar forward equation with transformed drift b~):

    D_s X_t = sigma(s, X_s) exp( int_s^t g(r, X_r) dr ),
    g = d_x b~ - (b~ sigma_x + sigma_t) / sigma - 1/2 sigma sigma_xx,

and, through Y = v(t, X), Z = sigma v_x(t, X),

    D_s Y_t = v_x(t, X_t) D_s X_t,
    D_s Z_t = (sigma v_xx + sigma_x v_x)(t, X_t) D_s X_t.

The exponent is stored as a running integral E_t per path so that
D_s X_t = sigma_s exp(E_t - E_s) for any recorded pair s <= t.

Second order (sigma = 1) uses Ito's formula on b~(u, X_u) D_{s'} X_u to
remove the second spatial derivative of b~:

    D_{s'} D_s X_t = D_s X_t * 2 [ b~ D_{s'}X |_s^t
                                   - int_s^t (d_u b~ + 2 b~ d_x b~) D_{s'}X_u du
                                   - int_s^t d_x b~ D_{s'}X_u dW_u ].
"""

from dataclasses import dataclass

import numpy as np

from ._interp import table_eval_many
from .estimators import BinnedRegressor
from .exceptions import DegenerateBins, MissingDerivatives, SmoothnessViolation
from .feynman_kac import _eval_columns, _sigma_columns, forward_drift
from .pde import GridFunction, transformed_drift
from .sde import BLOCK, as_coef


def drift_x_derivative(fld, model, route="auto"):
    """Tabulate d_x b~ on the field grid.

    ``route="chain"`` uses b_x + b_y v_x + b_z v_xx from the model's supplied
    derivatives; ``route="table"`` differentiates the tabulated b~ (allowed for
    unit-diffusion models); ``"auto"`` prefers the chain rule.
    """
    c = model.coefficients
    g = fld.grid
    tt = g.t_nodes[:, None]
    xx = g.x_nodes[None, :]
    have_chain = all(c.has(n) for n in ("b_x", "b_y", "b_z"))
    if route == "auto":
        route = "chain" if have_chain else "table"
    if route == "chain":
        if not have_chain:
            raise MissingDerivatives("chain rule for d_x b~ needs b_x, b_y and b_z")
        vals = (c.derivative("b_x")(tt, xx, fld.v, fld.v_x)
                + c.derivative("b_y")(tt, xx, fld.v, fld.v_x) * fld.v_x
                + c.derivative("b_z")(tt, xx, fld.v, fld.v_x) * fld.v_xx)
        return np.broadcast_to(vals, g.shape).copy()
    if route == "table":
        if c.sigma_const != 1.0:
            raise MissingDerivatives("direct differentiation of b~ is reserved for sigma = 1")
        bt = transformed_drift(fld, model).values
        return np.gradient(bt, g.dx, axis=1, edge_order=2)
    raise ValueError(f"unknown route {route!r}")


def exponent_integrand(fld, model, route="auto"):
    """Grid function g = d_x b~ - (b~ sigma_x + sigma_t)/sigma - sigma sigma_xx / 2."""
    c = model.coefficients
    gr = fld.grid
    bx = drift_x_derivative(fld, model, route)
    if c.sigma_const is not None:
        return GridFunction(gr, bx)
    for n in ("sigma_x", "sigma_t", "sigma_xx"):
        if not c.has(n):
            raise MissingDerivatives(f"non-constant sigma needs {n}")
    tt = gr.t_nodes[:, None]
    xx = gr.x_nodes[None, :]
    sig = c.diffusion_sigma(tt, xx)
    bt = transformed_drift(fld, model).values
    vals = (bx - (bt * c.derivative("sigma_x")(tt, xx) + c.derivative("sigma_t")(tt, xx)) / sig
            - 0.5 * sig * c.derivative("sigma_xx")(tt, xx))
    return GridFunction(gr, np.broadcast_to(vals, gr.shape))


@dataclass
class MalliavinSample:
    """First-order derivatives on the recorded columns of an ensemble.

    ``E[:, r]`` is the running exponent at column r and ``sig[:, r]`` the
    diffusion there; ``DX(i, j)`` returns D_{t_i} X_{t_j} per path (0 when
    i > j).  ``DY`` and ``DZ`` (filled by :func:`malliavin_backward`) are
    arrays ``(n_paths, S, R)`` over the s-columns ``s_pos``.
    """

    t_rec: np.ndarray
    E: np.ndarray
    sig: np.ndarray
    s_pos: np.ndarray
    DY: np.ndarray = None
    DZ: np.ndarray = None
    DDX: np.ndarray = None
    DDY: np.ndarray = None
    coarse_pos: np.ndarray = None

    def DX(self, i, j):
        if i > j:
            return np.zeros(self.E.shape[0])
        return self.sig[:, i] * np.exp(self.E[:, j] - self.E[:, i])

    def DX_array(self):
        """Array ``(n_paths, S, R)`` of D_s X_t for s in ``s_pos``."""
        R = self.E.shape[1]
        out = np.zeros((self.E.shape[0], len(self.s_pos), R))
        for a, i in enumerate(self.s_pos):
            out[:, a, i:] = self.sig[:, i, None] * np.exp(self.E[:, i:] - self.E[:, i, None])
        return out

    @property
    def diagonal_DX(self):
        return self.sig.copy()


def _running_exponent(ensemble, gfun, block=BLOCK):
    """Left-point running integral of g along every path, on the recorded columns."""
    R = len(ensemble.rec_idx)
    E = np.empty((ensemble.n_paths, R))
    t = ensemble.t_nodes
    dt = ensemble.dt
    vals, slopes, t0, tdt, x0, dx = gfun.table
    const = gfun.is_constant()
    for start, (X, _) in ensemble.iter_blocks(block):
        n = X.shape[0]
        if const:
            cum = np.outer(np.ones(n), np.arange(ensemble.n_steps + 1) * dt * vals.flat[0])
        else:
            gv = np.empty((n, ensemble.n_steps))
            for m in range(ensemble.n_steps):
                table_eval_many(vals, slopes, t0, tdt, x0, dx, float(t[m]),
                                np.ascontiguousarray(X[:, m]), gv[:, m])
            cum = np.zeros((n, ensemble.n_steps + 1))
            np.cumsum(gv * dt, axis=1, out=cum[:, 1:])
        E[start:start + n] = cum[:, ensemble.rec_idx]
    return E


def malliavin_forward(ensemble, fld, model, route="auto", s_stride=1):
    """D_s X_t on the recorded columns via the exponential representation.

    Raises
    ------
    MissingDerivatives
        When d_x b~ (or sigma derivatives) cannot be formed.
    """
    gfun = exponent_integrand(fld, model, route)
    E = _running_exponent(ensemble, gfun)
    sig = _sigma_columns(as_coef(_sigma_of(model), 1.0), ensemble.t_rec, ensemble.X)
    s_pos = np.arange(0, len(ensemble.rec_idx), int(s_stride))
    return MalliavinSample(t_rec=ensemble.t_rec, E=E, sig=sig, s_pos=s_pos)


def _sigma_of(model):
    c = model.coefficients
    return float(c.sigma_const) if c.sigma_const is not None else c.diffusion_sigma


def malliavin_backward(triple, fld, sample, model=None):
    """D_s Y_t = v_x D_s X_t and D_s Z_t = (sigma v_xx + sigma_x v_x) D_s X_t."""
    X = triple.X
    t = triple.t_rec
    vx = _eval_columns(fld.interp_v_x, t, X)
    vxx = _eval_columns(fld.interp_v_xx, t, X)
    sig = sample.sig
    if model is not None and model.coefficients.sigma_const is None:
        c = model.coefficients
        if not c.has("sigma_x"):
            raise MissingDerivatives("D Z needs sigma_x")
        sx = np.empty_like(X)
        for r, tr in enumerate(t):
            sx[:, r] = c.derivative("sigma_x")(tr, X[:, r])
    else:
        sx = np.zeros_like(X)
    DX = sample.DX_array()
    sample.DY = vx[:, None, :] * DX
    sample.DZ = (sig * vxx + sx * vx)[:, None, :] * DX
    return sample.DY, sample.DZ


def malliavin_covariance(DF, filtration_proxy, s_nodes, t_end, bins=50, min_per_bin=10):
    """Per-path int_0^t D_sF E[D_sF | X_s] ds with an equal-count bin regression.

    Parameters
    ----------
    DF : ndarray (n_paths, S)
        D_s F on the s-nodes.
    filtration_proxy : ndarray (n_paths, S)
        X_s used as the conditioning variable (Markov proxy).
    s_nodes : ndarray (S,)
        Left endpoints; the quadrature weights run up to ``t_end``.
    """
    DF = np.asarray(DF, float)
    Xs = np.asarray(filtration_proxy, float)
    n, S = DF.shape
    if n < bins * min_per_bin:
        raise DegenerateBins(f"{n} paths give fewer than {min_per_bin} per bin for {bins} bins")
    w = np.diff(np.r_[np.asarray(s_nodes, float), float(t_end)])
    total = np.zeros(n)
    for j in range(S):
        total += DF[:, j] * bin_regression(Xs[:, j], DF[:, j], bins) * w[j]
    return total


def bin_regression(x, y, bins):
    """Fitted values of a piecewise-constant equal-count regression of y on x."""
    return BinnedRegressor(n_bins=bins, min_per_bin=1).fit(x, y).fitted_


def covariance_bounds(F_samples, DF_samples, filtration_proxy, s_nodes, t_end, bins=50,
                      l=None, L=None, quantiles=(0.01, 0.99)):
    """Estimate (l, L) as the 1st and 99th percentiles of the covariance integral.

    Returns a dict with ``l_hat``, ``L_hat``, the per-path integrals and the
    fraction of paths outside a configured ``[l, L]`` (if given).
    """
    gamma = malliavin_covariance(DF_samples, filtration_proxy, s_nodes, t_end, bins)
    l_hat, L_hat = np.quantile(gamma, quantiles)
    out = {"l_hat": float(l_hat), "L_hat": float(L_hat), "min": float(gamma.min()),
           "max": float(gamma.max()), "mean": float(gamma.mean()), "bins": int(bins),
           "n_paths": int(len(gamma)), "integral": gamma}
    if l is not None or L is not None:
        lo = -np.inf if l is None else l
        hi = np.inf if L is None else L
        out["violation_fraction"] = float(np.mean((gamma < lo) | (gamma > hi)))
    return out


def _check_second_order(model):
    c = model.coefficients
    if c.sigma_const != 1.0:
        raise SmoothnessViolation("second-order representation is implemented for sigma = 1")
    for key in ("b", "f", "phi"):
        if not c.is_at_least(key, "C1"):
            raise SmoothnessViolation(f"coefficient {key} is flagged "
                                      f"{c.smoothness_flags.get(key)!r}, C1 is required")


def second_malliavin(ensemble, fld, model, stride=8, block=BLOCK):
    """D_{s'} D_s X_t and D_{s'} D_s Y_t on the coarse sub-grid of steps ``k * stride``.

    Returns a :class:`MalliavinSample` with ``DDX``/``DDY`` of shape
    ``(n_paths, C, C, C)`` indexed by (s', s, t), symmetric in (s', s) and zero
    when max(s', s) > t.  First-order arrays are attached on the same columns.
    """
    _check_second_order(model)
    g = fld.grid
    c = model.coefficients
    bt = forward_drift(fld, model)
    if isinstance(bt, tuple):
        a, cc = bt[1], bt[2]
        b_vals = a + cc * np.broadcast_to(g.x_nodes, g.shape)
    else:
        b_vals = bt.values
    bx_vals = np.gradient(b_vals, g.dx, axis=1, edge_order=2)
    if c.drift_affine is not None:
        bx_vals = np.full(g.shape, float(c.drift_affine[1]))
    bt_vals = np.gradient(b_vals, g.dt, axis=0, edge_order=2) if g.M >= 2 else np.zeros(g.shape)
    B = GridFunction(g, b_vals)
    Bx = GridFunction(g, bx_vals)
    Bt = GridFunction(g, bt_vals)
    M = ensemble.n_steps
    coarse = np.arange(0, M + 1, int(stride))
    if coarse[-1] != M:
        coarse = np.r_[coarse, M]
    C = len(coarse)
    n = ensemble.n_paths
    t = ensemble.t_nodes
    dt = ensemble.dt
    DDX = np.zeros((n, C, C, C))
    DDY = np.zeros((n, C, C, C))
    DXc = np.zeros((n, C, C))
    vx_c = np.empty((n, C))
    vxx_c = np.empty((n, C))
    for start, (X, dW) in ensemble.iter_blocks(block):
        nb = X.shape[0]
        sl = slice(start, start + nb)
        bvals = _eval_columns(B, t, X)
        bx = _eval_columns(Bx, t, X)
        btt = _eval_columns(Bt, t, X)
        E = np.zeros((nb, M + 1))
        np.cumsum(bx[:, :-1] * dt, axis=1, out=E[:, 1:])
        Xc = X[:, coarse]
        vx_c[sl] = _eval_columns(fld.interp_v_x, t[coarse], Xc)
        vxx_c[sl] = _eval_columns(fld.interp_v_xx, t[coarse], Xc)
        Ec = E[:, coarse]
        for i in range(C):
            DXc[sl, i, i:] = np.exp(Ec[:, i:] - Ec[:, i, None])
        drift_term = (btt + 2.0 * bvals * bx)
        for ip, sp in enumerate(coarse):
            # D_{s'} X_u for u >= s' on the fine grid
            Dsp = np.zeros((nb, M + 1))
            Dsp[:, sp:] = np.exp(E[:, sp:] - E[:, sp, None])
            A = np.zeros((nb, M + 1))
            np.cumsum(drift_term[:, :-1] * Dsp[:, :-1] * dt, axis=1, out=A[:, 1:])
            Bm = np.zeros((nb, M + 1))
            np.cumsum(bx[:, :-1] * Dsp[:, :-1] * dW, axis=1, out=Bm[:, 1:])
            bD = bvals * Dsp
            for i in range(ip, C):
                s = coarse[i]
                tj = coarse[i:]
                bracket = (bD[:, tj] - bD[:, s, None] - (A[:, tj] - A[:, s, None])
                           - (Bm[:, tj] - Bm[:, s, None]))
                val = DXc[sl, i, i:] * 2.0 * bracket
                DDX[sl, ip, i, i:] = val
                DDX[sl, i, ip, i:] = val
    for ip in range(C):
        for i in range(C):
            lo = max(ip, i)
            DDY[:, ip, i, lo:] = (vxx_c[:, lo:] * DXc[:, ip, lo:] * DXc[:, i, lo:]
                                  + vx_c[:, lo:] * DDX[:, ip, i, lo:])
    sample = MalliavinSample(t_rec=t[coarse], E=None, sig=np.ones((n, C)), s_pos=np.arange(C),
                             DDX=DDX, DDY=DDY, coarse_pos=coarse)
    sample.DY = vx_c[:, None, :] * DXc
    sample.DZ = vxx_c[:, None, :] * DXc
    sample.DXc = DXc
    return sample


def version_identity(sample):
    """Mean over paths and s <= t of |D_t D_s Y_t - D_s Z_t| on the coarse grid."""
    C = sample.DDY.shape[1]
    diffs = []
    for j in range(C):
        for i in range(j + 1):
            diffs.append(np.abs(sample.DDY[:, j, i, j] - sample.DZ[:, i, j]))
    d = np.concatenate(diffs)
    return {"mean_abs": float(d.mean()), "max_abs": float(d.max())}


def interpolation_tolerance(fld, name="v_x"):
    """Largest gap between the monotone cubic and a centred cubic at cell midpoints.

    A cheap, grid-intrinsic measure of how far interpolated values can drift
    from the underlying smooth function.
    """
    vals = getattr(fld, name)
    gf = getattr(fld, "interp_" + name)
    g = fld.grid
    xm = g.x_nodes[1:-2] + 0.5 * g.dx
    lag = (-vals[:, :-3] + 9.0 * vals[:, 1:-2] + 9.0 * vals[:, 2:-1] - vals[:, 3:]) / 16.0
    pc = np.empty_like(lag)
    for i, ti in enumerate(g.t_nodes):
        pc[i] = gf(np.full(xm.shape, ti), xm)
    return float(np.max(np.abs(pc - lag)))


def finite_difference_flow(simulate, x0, h):
    """Central difference (X(x0 + h) - X(x0 - h)) / 2h of a common-noise simulator.

    ``simulate(x)`` must return an array of path functionals driven by the
    same noise for every starting point.
    """
    return (simulate(x0 + h) - simulate(x0 - h)) / (2.0 * h)
