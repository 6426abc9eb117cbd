"""Reconstruction of (Y, Z) along simulated paths from the decoupling field.

Y_t = v(t, X_t) and Z_t = sigma(t, X_t) v_x(t, X_t).  The field is the single
source of truth for the backward pair; the BSDE itself only appears as a
residual check.
"""

from dataclasses import dataclass, field

import numpy as np

from ._interp import table_eval_many
from .exceptions import GridMismatch
from .pde import SolverConfig, solve_decoupling_field, transformed_drift
from .sde import BLOCK, as_coef, simulate_forward


def _eval_columns(gf, t_cols, X):
    out = np.empty_like(X)
    vals, slopes, t0, dt, x0, dx = gf.table
    for r, t in enumerate(t_cols):
        xc = np.ascontiguousarray(X[:, r])
        table_eval_many(vals, slopes, t0, dt, x0, dx, float(t), xc, out[:, r])
    return out


def _sigma_columns(sigma, t_cols, X):
    sig = as_coef(sigma, 1.0)
    if sig.kind == "affine" and sig.c == 0.0:
        return np.full_like(X, sig.a)
    out = np.empty_like(X)
    for r, t in enumerate(t_cols):
        out[:, r] = sig(float(t), X[:, r])
    return out


@dataclass
class TripleEnsemble:
    """Paths of (X, Y, Z) on the recorded columns of a path ensemble."""

    X: np.ndarray
    Y: np.ndarray
    Z: np.ndarray
    t_rec: np.ndarray
    field: object
    ensemble: object
    sigma: object
    provenance: dict = field(default_factory=dict)

    @property
    def V_x(self):
        sig = _sigma_columns(self.sigma, self.t_rec, self.X)
        return self.Z / sig


def _check_axes(fld, ensemble):
    g = fld.grid
    if not (np.isclose(g.t0, ensemble.t0) and np.isclose(g.T, ensemble.T)):
        raise GridMismatch(f"field time axis [{g.t0}, {g.T}] differs from ensemble "
                           f"[{ensemble.t0}, {ensemble.T}]")


def reconstruct_triple(fld, ensemble, sigma=1.0):
    """Evaluate Y = v(t, X) and Z = sigma v_x(t, X) on every recorded column.

    Raises
    ------
    GridMismatch
        If the field and the ensemble do not share t0 and T.
    """
    _check_axes(fld, ensemble)
    t_cols = ensemble.t_rec
    Y = _eval_columns(fld.interp_v, t_cols, ensemble.X)
    Vx = _eval_columns(fld.interp_v_x, t_cols, ensemble.X)
    Z = _sigma_columns(sigma, t_cols, ensemble.X) * Vx
    return TripleEnsemble(X=ensemble.X, Y=Y, Z=Z, t_rec=t_cols, field=fld, ensemble=ensemble,
                          sigma=sigma,
                          provenance={"field": fld.model_name, "grid": fld.grid.to_dict(),
                                      "ensemble": ensemble.summary()})


def bsde_residual(triple, model, z_scale=1.0):
    """Per-path residual Y_0 - phi(X_T) - sum f dt + sum Z dW with left-point sums.

    ``z_scale`` multiplies Z before it enters the sums (a negative control
    uses 2).  The triple must be recorded on every step.
    """
    ens = triple.ensemble
    if not ens.full:
        raise ValueError("the residual needs every step recorded")
    c = model.coefficients
    t = ens.t_nodes
    dt = ens.dt
    res = np.empty(ens.n_paths)
    sig = _sigma_columns(triple.sigma, t, triple.X)
    for start, (_, dW) in ens.iter_blocks(BLOCK):
        sl = slice(start, start + dW.shape[0])
        X, Y, Z = triple.X[sl], triple.Y[sl], z_scale * triple.Z[sl]
        G = Z / sig[sl]
        f = np.broadcast_to(c.driver_f(t[None, :-1], X[:, :-1], Y[:, :-1], G[:, :-1]),
                            dW.shape)
        res[sl] = (Y[:, 0] - c.terminal_phi(X[:, -1]) - f.sum(axis=1) * dt
                   + np.sum(Z[:, :-1] * dW, axis=1))
    a = np.abs(res)
    return {"mean_abs": float(a.mean()), "sup": float(a.max()), "mean": float(res.mean()),
            "rms": float(np.sqrt(np.mean(res ** 2))), "n_paths": int(ens.n_paths),
            "n_steps": int(ens.n_steps), "per_path": res}


def solve_and_simulate(model, grid, mc_steps, n_paths, seed, cfg=None, record="all", threads=1,
                       stream=0):
    """Field solve, transformed drift and forward paths for one model."""
    fld = solve_decoupling_field(model, grid, cfg or SolverConfig())
    bt = forward_drift(fld, model)
    from .pde import SpaceTimeGrid
    mc = SpaceTimeGrid(grid.t0, grid.T, int(mc_steps), grid.x_min, grid.x_max, grid.J)
    ens = simulate_forward(bt, sigma_spec(model), model.x0, mc, n_paths, seed, record=record,
                           threads=threads, stream=stream)
    return fld, bt, ens


def forward_drift(fld, model):
    """The drift fed to the Monte Carlo engine: affine models pass through exactly."""
    c = model.coefficients
    if c.drift_affine is not None:
        return ("affine",) + tuple(float(v) for v in c.drift_affine)
    return transformed_drift(fld, model)


def sigma_spec(model):
    c = model.coefficients
    if c.sigma_const is not None:
        return float(c.sigma_const)
    return c.diffusion_sigma


def comonotonicity_check(model1, model2, grid, n_paths, seed, mc_steps=None, tol=1e-8,
                         cfg=None, threads=1, block=BLOCK):
    """Products Z^1 Z^2 on shared noise, streamed over path blocks.

    Both forward equations are driven by the same Brownian increments (same
    seed and stream).  Every time step of every path enters the statistics.
    """
    mc_steps = grid.M if mc_steps is None else mc_steps
    f1 = solve_decoupling_field(model1, grid, cfg or SolverConfig())
    f2 = solve_decoupling_field(model2, grid, cfg or SolverConfig())
    from .pde import SpaceTimeGrid
    mc = SpaceTimeGrid(grid.t0, grid.T, int(mc_steps), grid.x_min, grid.x_max, grid.J)
    e1 = simulate_forward(forward_drift(f1, model1), sigma_spec(model1), model1.x0, mc, n_paths,
                          seed, record="final", threads=threads)
    e2 = simulate_forward(forward_drift(f2, model2), sigma_spec(model2), model2.x0, mc, n_paths,
                          seed, record="final", threads=threads)
    t = mc.t_nodes
    pmin, pmax = np.inf, -np.inf
    neg = pos = 0
    zmin = [np.inf, np.inf]
    zmax = [-np.inf, -np.inf]
    for start in range(0, n_paths, block):
        count = min(block, n_paths - start)
        X1, _ = e1.replay(start, count)
        X2, _ = e2.replay(start, count)
        Z1 = _sigma_columns(sigma_spec(model1), t, X1) * _eval_columns(f1.interp_v_x, t, X1)
        Z2 = _sigma_columns(sigma_spec(model2), t, X2) * _eval_columns(f2.interp_v_x, t, X2)
        prod = Z1 * Z2
        pmin = min(pmin, float(prod.min()))
        pmax = max(pmax, float(prod.max()))
        neg += int(np.count_nonzero(prod < -tol))
        pos += int(np.count_nonzero(prod > tol))
        for i, Z in enumerate((Z1, Z2)):
            zmin[i] = min(zmin[i], float(Z.min()))
            zmax[i] = max(zmax[i], float(Z.max()))
    total = n_paths * (mc_steps + 1)
    return {"min_product": pmin, "max_product": pmax, "fraction_negative": neg / total,
            "fraction_positive": pos / total, "tol": tol, "n_paths": int(n_paths),
            "n_steps": int(mc_steps), "seed": int(seed), "Z1_range": [zmin[0], zmax[0]],
            "Z2_range": [zmin[1], zmax[1]], "comonotone": pmin >= -tol,
            "anti_comonotone": pmax <= tol}


def comparison_check(model1, model2, grid, tol=1e-8, cfg=None):
    """Fraction of grid points with v^1 <= v^2 + tol.

    The caller is responsible for the hypotheses phi^1 <= phi^2 and
    f^1(., Y^2, Z^2) <= f^2(., Y^2, Z^2).
    """
    f1 = solve_decoupling_field(model1, grid, cfg or SolverConfig())
    f2 = solve_decoupling_field(model2, grid, cfg or SolverConfig())
    ok = f1.v <= f2.v + tol
    return {"fraction": float(np.mean(ok)), "tol": tol,
            "max_violation": float(np.max(f1.v - f2.v)), "n_points": int(ok.size)}
