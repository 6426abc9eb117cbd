"""Backward finite-difference solvers for the decoupling field.

The quasi-linear terminal value problem

    v_t + 1/2 sigma^2 v_xx + b(t, x, v, v_x) v_x + f(t, x, v, v_x) = 0,
    v(T, .) = phi,

is stepped backward on a uniform grid with a theta scheme.  Diffusion and the
(frozen-coefficient) transport term are implicit; the coefficients b and f
are evaluated at the previous Picard iterate and the step is iterated to a
fixed point.  The same machinery solves the linear backward Kolmogorov
equation used by the Zvonkin transform.
"""

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_banded

from ._interp import pchip_slopes, table_eval_pairs
from .exceptions import CFLViolation, GridMismatch, PicardDiverged


@dataclass(frozen=True)
class SpaceTimeGrid:
    """Uniform space-time mesh ``[t0, T] x [x_min, x_max]``.

    ``M`` time steps and ``J`` space intervals, so arrays on the grid have
    shape ``(M + 1, J + 1)``.
    """

    t0: float
    T: float
    M: int
    x_min: float
    x_max: float
    J: int

    def __post_init__(self):
        if not (self.T > self.t0 and self.x_max > self.x_min):
            raise ValueError("grid bounds must be increasing")
        if self.M < 1 or self.J < 4:
            raise ValueError("need M >= 1 and J >= 4")

    @property
    def dt(self):
        return (self.T - self.t0) / self.M

    @property
    def dx(self):
        return (self.x_max - self.x_min) / self.J

    @property
    def t_nodes(self):
        return np.linspace(self.t0, self.T, self.M + 1)

    @property
    def x_nodes(self):
        return np.linspace(self.x_min, self.x_max, self.J + 1)

    @property
    def shape(self):
        return (self.M + 1, self.J + 1)

    def contains(self, x):
        return self.x_min < x < self.x_max

    def same_time_axis(self, other, rtol=1e-12):
        return (math.isclose(self.t0, other.t0, rel_tol=rtol, abs_tol=rtol)
                and math.isclose(self.T, other.T, rel_tol=rtol, abs_tol=rtol))

    @classmethod
    def around(cls, model, M, J, half_width=6.0):
        """Grid centred at the model's x0 with the given half width."""
        x0 = float(model.x0)
        return cls(float(model.t0), float(model.horizon_T), int(M), x0 - half_width,
                   x0 + half_width, int(J))

    def to_dict(self):
        return {"t0": self.t0, "T": self.T, "M": self.M, "x_min": self.x_min,
                "x_max": self.x_max, "J": self.J, "dt": self.dt, "dx": self.dx}


class GridFunction:
    """Tabulated function on a space-time grid.

    Evaluation is monotone cubic in x and linear in t; queries outside the
    grid are clamped to the boundary.
    """

    def __init__(self, grid, values):
        values = np.ascontiguousarray(values, dtype=float)
        if values.shape != grid.shape:
            raise GridMismatch(f"values shape {values.shape} != grid shape {grid.shape}")
        self.grid = grid
        self.values = values
        self.values.setflags(write=False)
        self.slopes = np.ascontiguousarray(pchip_slopes(values, grid.dx))
        self.slopes.setflags(write=False)

    @property
    def table(self):
        g = self.grid
        return (self.values, self.slopes, g.t0, g.dt, g.x_min, g.dx)

    def __call__(self, t, x):
        t, x = np.broadcast_arrays(np.asarray(t, float), np.asarray(x, float))
        tf = np.ascontiguousarray(t.ravel())
        xf = np.ascontiguousarray(x.ravel())
        out = np.empty(xf.shape[0])
        table_eval_pairs(*self.table, tf, xf, out)
        return out.reshape(x.shape) if x.shape else float(out[0])

    def is_constant(self):
        return bool(np.all(self.values == self.values.flat[0]))


@dataclass
class SolverConfig:
    """Options of the backward solver.

    ``scheme`` is ``"semi-implicit"`` (theta scheme, default theta 1/2 with
    Rannacher start-up) or ``"explicit"`` (theta 0, CFL-limited).

    ``boundary`` selects the closure at the edge of the computational domain:
    ``"extrapolate"`` (zero curvature, v_0 = 2 v_1 - v_2), ``"quadratic"``
    (zero third difference) or ``"pde"`` (equation kept without the curvature
    term).  ``pad`` widens the computational domain on both sides beyond the
    output grid, in units of x; ``None`` picks 3 sigma_max sqrt(T - t0), and
    0 solves on the output grid itself.
    """

    scheme: str = "semi-implicit"
    theta: float = 0.5
    picard_max_iter: int = 50
    damping: float = 0.5
    tol: float = 1e-10
    rannacher_steps: int = 2
    gamma: float = 0.5
    gradient_bound: float = None
    boundary: str = "extrapolate"
    pad: float = None

    def __post_init__(self):
        if self.scheme not in ("semi-implicit", "explicit"):
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if self.scheme == "explicit":
            self.theta = 0.0
        if not 0.0 <= self.theta <= 1.0:
            raise ValueError("theta must lie in [0, 1]")
        if self.boundary not in ("extrapolate", "quadratic", "pde"):
            raise ValueError(f"unknown boundary rule {self.boundary!r}")
        if not 0.0 < self.damping <= 1.0:
            raise ValueError("damping must lie in (0, 1]")


@dataclass
class DecouplingField:
    """Solved field ``v`` with its first and second spatial derivatives."""

    grid: SpaceTimeGrid
    v: np.ndarray
    v_x: np.ndarray = None
    v_xx: np.ndarray = None
    iteration_report: dict = field(default_factory=dict)
    model_name: str = ""

    def __post_init__(self):
        if self.v_x is None or self.v_xx is None:
            gradient_and_hessian(self)
        self._fns = {}

    def _gf(self, name):
        if name not in self._fns:
            self._fns[name] = GridFunction(self.grid, getattr(self, name))
        return self._fns[name]

    @property
    def interp_v(self):
        return self._gf("v")

    @property
    def interp_v_x(self):
        return self._gf("v_x")

    @property
    def interp_v_xx(self):
        return self._gf("v_xx")

    def __call__(self, t, x):
        return self.interp_v(t, x)

    def sup_abs(self):
        return float(np.max(np.abs(self.v)))


def gradient_and_hessian(fld):
    """Fill ``v_x`` and ``v_xx`` by finite differences.

    Central differences in the interior, second-order one-sided stencils on
    the boundary columns.  Quadratics are differentiated exactly.
    """
    v = np.asarray(fld.v, float)
    dx = fld.grid.dx
    vx = np.empty_like(v)
    vx[:, 1:-1] = (v[:, 2:] - v[:, :-2]) / (2.0 * dx)
    vx[:, 0] = (-3.0 * v[:, 0] + 4.0 * v[:, 1] - v[:, 2]) / (2.0 * dx)
    vx[:, -1] = (3.0 * v[:, -1] - 4.0 * v[:, -2] + v[:, -3]) / (2.0 * dx)
    vxx = np.empty_like(v)
    vxx[:, 1:-1] = (v[:, 2:] - 2.0 * v[:, 1:-1] + v[:, :-2]) / dx ** 2
    vxx[:, 0] = (2.0 * v[:, 0] - 5.0 * v[:, 1] + 4.0 * v[:, 2] - v[:, 3]) / dx ** 2
    vxx[:, -1] = (2.0 * v[:, -1] - 5.0 * v[:, -2] + 4.0 * v[:, -3] - v[:, -4]) / dx ** 2
    fld.v_x = vx
    fld.v_xx = vxx
    if hasattr(fld, "_fns"):
        fld._fns = {}
    return fld


def _d1(w, dx):
    out = np.empty_like(w)
    out[1:-1] = (w[2:] - w[:-2]) / (2.0 * dx)
    out[0] = (-3.0 * w[0] + 4.0 * w[1] - w[2]) / (2.0 * dx)
    out[-1] = (3.0 * w[-1] - 4.0 * w[-2] + w[-3]) / (2.0 * dx)
    return out


def _apply_op(a2, adv, react, w, dx, boundary):
    """Action of a2 D2 + adv D1 - react on w.

    With ``boundary="extrapolate"`` the boundary entries are 0 (those rows
    are algebraic); with ``boundary="pde"`` the boundary rows keep transport
    and reaction with one-sided first differences and no curvature term.
    """
    out = np.zeros_like(w)
    out[1:-1] = (a2[1:-1] * (w[2:] - 2.0 * w[1:-1] + w[:-2]) / dx ** 2
                 + adv[1:-1] * (w[2:] - w[:-2]) / (2.0 * dx) - react[1:-1] * w[1:-1])
    if boundary == "pde":
        out[0] = adv[0] * (-3.0 * w[0] + 4.0 * w[1] - w[2]) / (2.0 * dx) - react[0] * w[0]
        out[-1] = adv[-1] * (3.0 * w[-1] - 4.0 * w[-2] + w[-3]) / (2.0 * dx) - react[-1] * w[-1]
    return out


def _implicit_matrix(a2, adv, react, dx, k, boundary):
    """Banded (l = u = 2) form of I - k (a2 D2 + adv D1 - react) with boundary rows."""
    n = a2.shape[0]
    ab = np.zeros((7, n))
    lo = k * (a2 / dx ** 2 - adv / (2.0 * dx))
    di = 1.0 + k * (2.0 * a2 / dx ** 2 + react)
    up = k * (a2 / dx ** 2 + adv / (2.0 * dx))
    # ab[3 + i - j, j] = A[i, j]
    ab[3, 1:-1] = di[1:-1]
    ab[2, 2:] = -up[1:-1]
    ab[4, :-2] = -lo[1:-1]
    if boundary == "pde":
        c0 = k * adv[0] / (2.0 * dx)
        cJ = k * adv[-1] / (2.0 * dx)
        row0 = [1.0 + 3.0 * c0 + k * react[0], -4.0 * c0, c0]
        rowJ = [1.0 - 3.0 * cJ + k * react[-1], 4.0 * cJ, -cJ]
    elif boundary == "quadratic":
        row0 = rowJ = [1.0, -3.0, 3.0, -1.0]
    else:
        # v0 - 2 v1 + v2 = 0 and v_J - 2 v_{J-1} + v_{J-2} = 0
        row0 = rowJ = [1.0, -2.0, 1.0]
    for j, c in enumerate(row0):
        ab[3 - j, j] = c
    for j, c in enumerate(rowJ):
        ab[3 + j, n - 1 - j] = c
    return ab


def _backward_solve(grid, terminal, coef, cfg, linear=False, label="field"):
    """Generic theta-scheme backward solve.

    ``coef(n, w, w_x)`` returns ``(a2, adv, react, src)`` at time node n for
    the PDE  v_t + a2 v_xx + adv v_x - react v + src = 0.
    """
    M = grid.M
    dt, dx = grid.dt, grid.dx
    bc = cfg.boundary
    J1 = grid.J + 1
    v = np.empty((M + 1, J1))
    v[M] = terminal
    iters = np.zeros(M, dtype=int)
    resid = np.zeros(M)
    unconverged = 0
    if cfg.scheme == "explicit":
        a2_T = coef(M, v[M], _d1(v[M], dx))[0]
        if np.max(2.0 * a2_T) * dt / dx ** 2 > 0.5:
            raise CFLViolation(
                f"sigma^2 dt / dx^2 = {np.max(2 * a2_T) * dt / dx ** 2:.3g} exceeds 1/2")

    def substep(vn1, n_new, n_old, h, theta):
        a2o, advo, reo, srco = coef(n_old, vn1, _d1(vn1, dx))
        rhs_fixed = vn1 + h * (1.0 - theta) * (_apply_op(a2o, advo, reo, vn1, dx, bc) + srco)
        w = vn1.copy()
        last = np.inf
        growth = 0
        k_used = 0
        res = 0.0
        max_it = 1 if (linear and theta == 0.0) else (2 if linear else cfg.picard_max_iter)
        for k in range(max_it):
            a2, adv, re, src = coef(n_new, w, _d1(w, dx))
            rhs = rhs_fixed + h * theta * src
            if bc != "pde":
                rhs[0] = 0.0
                rhs[-1] = 0.0
            if theta > 0.0:
                new = solve_banded((3, 3), _implicit_matrix(a2, adv, re, dx, h * theta, bc), rhs,
                                   check_finite=False)
            else:
                new = rhs
                if bc == "extrapolate":
                    new[0] = 2.0 * new[1] - new[2]
                    new[-1] = 2.0 * new[-2] - new[-3]
                elif bc == "quadratic":
                    new[0] = 3.0 * new[1] - 3.0 * new[2] + new[3]
                    new[-1] = 3.0 * new[-2] - 3.0 * new[-3] + new[-4]
            res = float(np.max(np.abs(new - w)))
            k_used = k + 1
            if not np.isfinite(res):
                raise PicardDiverged(f"{label}: non-finite iterate at time node {n_new}")
            if linear:
                w = new
                if res <= cfg.tol * max(1.0, float(np.max(np.abs(new)))) or k == max_it - 1:
                    break
                continue
            if res > last:
                growth += 1
                if growth >= 3:
                    raise PicardDiverged(
                        f"{label}: Picard residual grew 3 times in a row at time node {n_new}")
            else:
                growth = 0
            last = res
            if res <= cfg.tol:
                w = new
                break
            w = w + cfg.damping * (new - w)
        return w, k_used, res

    ran = cfg.rannacher_steps if cfg.theta < 1.0 and cfg.scheme != "explicit" else 0
    for step, n in enumerate(range(M - 1, -1, -1)):
        if step < ran:
            # two implicit Euler half steps damp the start-up oscillations
            # t_{n+1/2} is approximated by the nodes themselves for coefficient lookup
            half, k1, r1 = substep(v[n + 1], n, n + 1, 0.5 * dt, 1.0)
            v[n], k2, r2 = substep(half, n, n, 0.5 * dt, 1.0)
            iters[n] = k1 + k2
            resid[n] = max(r1, r2)
        else:
            v[n], iters[n], resid[n] = substep(v[n + 1], n, n + 1, dt, cfg.theta)
        if not linear and resid[n] > cfg.tol:
            unconverged += 1
    if unconverged:
        warnings.warn(f"{label}: Picard tolerance not reached on {unconverged} of {M} steps",
                      RuntimeWarning, stacklevel=3)
    report = {"iterations": iters.tolist(), "final_residual": resid.tolist(),
              "max_iterations": int(iters.max()), "max_residual": float(resid.max()),
              "unconverged_steps": int(unconverged)}
    return v, report


def _model_coef(model, grid, x=None):
    c = model.coefficients
    t = grid.t_nodes
    x = grid.x_nodes if x is None else x

    def coef(n, w, wx):
        tn = t[n]
        sig = np.broadcast_to(c.diffusion_sigma(tn, x), x.shape)
        a2 = 0.5 * sig ** 2
        adv = np.broadcast_to(c.drift_b(tn, x, w, wx), x.shape)
        src = np.broadcast_to(c.driver_f(tn, x, w, wx), x.shape)
        return a2, adv, np.zeros_like(x), src
    return coef


def solve_decoupling_field(model, grid, cfg=None):
    """Solve the quasi-linear PDE for the decoupling field of ``model``.

    Parameters
    ----------
    model : ModelInstance
    grid : SpaceTimeGrid
        Its time axis must run from ``model.t0`` to ``model.horizon_T``.
    cfg : SolverConfig, optional

    Returns
    -------
    DecouplingField
        ``v`` with ``v_x``, ``v_xx`` and a Picard report.  The terminal slice
        equals ``phi`` on the nodes bit for bit.
    """
    cfg = cfg or SolverConfig()
    if not math.isclose(grid.T, model.horizon_T) or not math.isclose(grid.t0, model.t0):
        raise GridMismatch("grid time axis does not match the model horizon")
    if not grid.contains(model.x0):
        raise GridMismatch("x0 must lie strictly inside the grid")
    pad = cfg.pad
    if pad is None:
        _, smax = model.coefficients.sigma_bounds(grid.T, grid.x_nodes)
        pad = 3.0 * smax * math.sqrt(grid.T - grid.t0)
    n_pad = int(math.ceil(pad / grid.dx - 1e-9)) if pad > 0 else 0
    work = SpaceTimeGrid(grid.t0, grid.T, grid.M, grid.x_min - n_pad * grid.dx,
                         grid.x_max + n_pad * grid.dx, grid.J + 2 * n_pad)
    xw = work.x_nodes
    if n_pad:
        # reuse the exact output nodes so the terminal slice is bit-identical
        xw[n_pad:n_pad + grid.J + 1] = grid.x_nodes
    phi = np.asarray(model.coefficients.terminal_phi(xw), float)
    phi = np.broadcast_to(phi, xw.shape).copy()
    v, report = _backward_solve(work, phi, _model_coef(model, work, xw), cfg, label=model.name)
    v[-1] = phi
    report["pad_cells"] = n_pad
    full = DecouplingField(grid=work, v=v)
    sl = slice(n_pad, n_pad + grid.J + 1)
    fld = DecouplingField(grid=grid, v=np.ascontiguousarray(v[:, sl]),
                          v_x=np.ascontiguousarray(full.v_x[:, sl]),
                          v_xx=np.ascontiguousarray(full.v_xx[:, sl]),
                          iteration_report=report, model_name=model.name)
    report["gradient_bound"] = gradient_bound_check(fld, cfg.gamma, cfg.gradient_bound)
    return fld


def gradient_bound_check(fld, gamma=0.5, bound=None):
    """Audit sup |v_x| (T - t)^{1-gamma} over the interior and fit gamma.

    The fitted exponent regresses log sup_x |v_x(t, .)| on log(T - t); a
    bounded gradient gives a slope near 0, i.e. gamma near 1.
    """
    g = fld.grid
    tau = g.T - g.t_nodes[:-1]
    sup_vx = np.max(np.abs(fld.v_x[:-1, 1:-1]), axis=1)
    weighted = float(np.max(sup_vx * tau ** (1.0 - gamma)))
    ok = np.isfinite(weighted) if bound is None else bool(weighted <= bound)
    mask = sup_vx > 0
    if mask.sum() >= 2:
        slope = np.polyfit(np.log(tau[mask]), np.log(sup_vx[mask]), 1)[0]
        best_gamma = float(np.clip(1.0 + slope, 0.0, 1.0))
    else:
        best_gamma = 1.0
    return {"gamma": gamma, "weighted_sup": weighted, "bound": bound, "pass": bool(ok),
            "best_fit_gamma": best_gamma}


def transformed_drift(fld, model):
    """b_tilde(t, x) = b(t, x, v(t, x), v_x(t, x)) as a :class:`GridFunction`."""
    g = fld.grid
    tt = g.t_nodes[:, None]
    xx = g.x_nodes[None, :]
    vals = np.broadcast_to(model.coefficients.drift_b(tt, xx, fld.v, fld.v_x), g.shape)
    return GridFunction(g, vals)


def solve_kolmogorov_U(b_tilde, sigma, mu, grid, cfg=None):
    """Solve U_t + 1/2 sigma^2 U_xx + b U_x - mu U = -b with U(T) = 0.

    Parameters
    ----------
    b_tilde : GridFunction or ndarray
        Drift tabulated on ``grid``.
    sigma : callable or float
        Diffusion ``sigma(t, x)``.
    mu : float
        Positive reaction coefficient.

    Returns
    -------
    (U, DU) : tuple of ndarray
    """
    if mu <= 0:
        raise ValueError("mu must be positive")
    cfg = cfg or SolverConfig()
    bvals = b_tilde.values if isinstance(b_tilde, GridFunction) else np.asarray(b_tilde, float)
    if bvals.shape != grid.shape:
        raise GridMismatch("drift table does not live on the given grid")
    t = grid.t_nodes
    x = grid.x_nodes
    react = np.full(x.shape, float(mu))

    def coef(n, w, wx):
        s = sigma if np.isscalar(sigma) else sigma(t[n], x)
        a2 = 0.5 * np.broadcast_to(np.asarray(s, float), x.shape) ** 2
        return a2, bvals[n], react, bvals[n]

    if not np.any(bvals):
        U = np.zeros(grid.shape)
        return U, np.zeros(grid.shape)
    U, _ = _backward_solve(grid, np.zeros(grid.J + 1), coef, cfg, linear=True, label="kolmogorov")
    DU = np.empty_like(U)
    for n in range(U.shape[0]):
        DU[n] = _d1(U[n], grid.dx)
    return U, DU


def comparison_fraction(f1, f2, tol=1e-8):
    """Fraction of grid points where v1 <= v2 + tol."""
    if f1.grid != f2.grid:
        raise GridMismatch("fields live on different grids")
    return float(np.mean(f1.v <= f2.v + tol))
