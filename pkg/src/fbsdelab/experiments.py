"""Experiment pipeline: config -> stages -> JSON/CSV reports.

Each stage computes its results, evaluates named checks and writes
``<out>/<experiment>/<stage>.json`` (plus ``<stage>.csv`` when it has curves).
Intermediate objects (field, ensemble, triple) are built once per pipeline
and shared between stages.  Nothing that depends on the worker count or the
wall clock enters a report.
"""

import math
from importlib import metadata
from pathlib import Path

import numpy as np

from . import io
from .exceptions import ConfigInvalid, Degenerate
from .models import model_from_dict, sigmoid
from .pde import SolverConfig, SpaceTimeGrid, solve_decoupling_field

MC_CHECKS = {"simulate", "density", "bounds_X", "bounds_Y", "bounds_Z", "tail", "comonotone",
             "malliavin", "localtime", "zvonkin", "regime_switching"}

# stages run in this order whatever the order of the config's check list
STAGE_ORDER = ("field", "field_oracle", "simulate", "density", "bounds_X", "bounds_Y",
               "bounds_Z", "tail", "comonotone", "malliavin", "localtime", "zvonkin", "price",
               "regime_switching")


def check(value, threshold, relation):
    """A named check record; ``relation`` is one of "<=", "<", ">=", ">", "==", "in"."""
    if relation == "<=":
        ok = value <= threshold
    elif relation == "<":
        ok = value < threshold
    elif relation == ">=":
        ok = value >= threshold
    elif relation == ">":
        ok = value > threshold
    elif relation == "==":
        ok = value == threshold
    elif relation == "in":
        ok = threshold[0] <= value <= threshold[1]
    else:
        raise ValueError(f"unknown relation {relation!r}")
    return {"value": value, "threshold": threshold, "relation": relation, "pass": bool(ok)}


def versions():
    out = {}
    for dist in ("artifact", "numpy", "scipy", "numba", "scikit-learn"):
        try:
            out[dist] = metadata.version(dist)
        except metadata.PackageNotFoundError:
            out[dist] = "unknown"
    return out


class Pipeline:
    """Shared state of one experiment run.

    Parameters
    ----------
    cfg : dict
        Validated config document.
    out : str or Path, optional
        Output root; defaults to the config's ``out`` entry or ``"out"``.
    seed : int, optional
        Overrides ``mc.seed``.
    threads : int
        Worker cap for the Monte Carlo engine (does not change any result).
    """

    def __init__(self, cfg, out=None, seed=None, threads=1):
        io.validate_config(cfg)
        self.cfg = cfg
        self.experiment = cfg["experiment"]
        self.threads = int(threads)
        self.dir = Path(out if out is not None else cfg.get("out", "out")) / self.experiment
        built = model_from_dict(cfg["model"])
        if isinstance(built, tuple):
            self.pair = built
            self.model = built[1]
        else:
            self.pair = None
            self.model = built
        self.model2 = model_from_dict(cfg["model2"]) if "model2" in cfg else None
        g = cfg.get("grid", {})
        M, J = int(g.get("M", 200)), int(g.get("J", 200))
        if "x_min" in g or "x_max" in g:
            if not ("x_min" in g and "x_max" in g):
                raise ConfigInvalid("grid: give both x_min and x_max or neither")
            self.grid = SpaceTimeGrid(self.model.t0, self.model.T, M, float(g["x_min"]),
                                      float(g["x_max"]), J)
        else:
            self.grid = SpaceTimeGrid.around(self.model, M, J, float(g.get("half_width", 6.0)))
        if not self.grid.x_min < self.model.x0 < self.grid.x_max:
            raise ConfigInvalid("grid: x0 must lie strictly inside [x_min, x_max]")
        try:
            self.solver = SolverConfig(**cfg.get("solver", {}))
        except (TypeError, ValueError) as exc:
            raise ConfigInvalid(f"solver: {exc}") from None
        mc = cfg.get("mc", {})
        self.seed = mc.get("seed") if seed is None else int(seed)
        self.n_paths = int(mc.get("n_paths", 10_000))
        self.n_steps = int(mc.get("n_steps", self.grid.M))
        self.stride = int(mc.get("record_stride", max(self.n_steps // 16, 1)))
        self.stream = int(mc.get("stream", 0))
        self.params = cfg.get("params", {})
        self.checks = list(cfg.get("checks", []))
        self._cache = {}
        self.current_stage = None

    # -- shared objects -------------------------------------------------

    def require_seed(self, stage):
        if self.seed is None:
            raise ConfigInvalid(f"{stage}: a seed is required for Monte Carlo stages")

    def p(self, stage):
        return dict(self.params.get(stage, {}))

    @property
    def field(self):
        if "field" not in self._cache:
            self._cache["field"] = solve_decoupling_field(self.model, self.grid, self.solver)
        return self._cache["field"]

    @property
    def mc_grid(self):
        g = self.grid
        return SpaceTimeGrid(g.t0, g.T, self.n_steps, g.x_min, g.x_max, g.J)

    def step_of(self, t):
        dt = (self.model.T - self.model.t0) / self.n_steps
        m = int(round((t - self.model.t0) / dt))
        if not 0 <= m <= self.n_steps or not math.isclose(self.model.t0 + m * dt, t,
                                                           abs_tol=1e-9):
            raise ConfigInvalid(f"time {t} is not a node of the Monte Carlo grid")
        return m

    def _probe_steps(self):
        steps = set()
        for name in ("bounds_X", "bounds_Y", "bounds_Z", "tail", "density"):
            t = self.params.get(name, {}).get("t")
            if t is not None:
                steps.add(self.step_of(float(t)))
        return steps

    @property
    def ensemble(self):
        if "ensemble" not in self._cache:
            from .feynman_kac import forward_drift, sigma_spec
            from .sde import simulate_forward
            rec = sorted(set(range(0, self.n_steps + 1, self.stride)) | {self.n_steps}
                         | self._probe_steps())
            self._cache["ensemble"] = simulate_forward(
                forward_drift(self.field, self.model), sigma_spec(self.model), self.model.x0,
                self.mc_grid, self.n_paths, self.seed, record=rec, stream=self.stream,
                threads=self.threads)
        return self._cache["ensemble"]

    @property
    def triple(self):
        if "triple" not in self._cache:
            from .feynman_kac import reconstruct_triple, sigma_spec
            self._cache["triple"] = reconstruct_triple(self.field, self.ensemble,
                                                       sigma_spec(self.model))
        return self._cache["triple"]

    def model_info(self):
        return {"name": self.model.name, "params": dict(self.model.params), "x0": self.model.x0,
                "T": self.model.T, "t0": self.model.t0}

    # -- running --------------------------------------------------------

    def run_stage(self, name):
        self.current_stage = name
        if name in MC_CHECKS:
            self.require_seed(name)
        fn = getattr(self, "stage_" + name)
        results, checks, csv = fn()
        report = {"stage": name, "experiment": self.experiment, "model": self.model_info(),
                  "grid": self.grid.to_dict(), "seed": self.seed if name in MC_CHECKS else None,
                  "results": results, "checks": checks,
                  "pass": all(c["pass"] for c in checks.values())}
        io.write_json(self.dir / f"{name}.json", report)
        if csv is not None:
            io.write_csv(self.dir / f"{name}.csv", csv)
        return report

    def run(self, stages=None):
        """Run the given stages (default: the config's checks) in dependency order."""
        stages = self.checks if stages is None else list(stages)
        if not stages:
            raise ConfigInvalid("no checks requested")
        for s in stages:
            if s not in STAGE_ORDER:
                raise ConfigInvalid(f"unknown check {s!r}")
        if any(s in MC_CHECKS for s in stages):
            self.require_seed("run")
        ordered = [s for s in STAGE_ORDER if s in stages]
        return {s: self.run_stage(s) for s in ordered}

    # -- stages ---------------------------------------------------------

    def stage_field(self):
        fld = self.field
        g = self.grid
        phi = np.asarray(self.model.coefficients.terminal_phi(g.x_nodes), float)
        rep = fld.iteration_report
        inv = self.model.coefficients.check_invariants(g.t_nodes[::max(g.M // 20, 1)], g.x_nodes)
        results = {"sup_abs_v": fld.sup_abs(), "max_iterations": rep["max_iterations"],
                   "max_residual": rep["max_residual"],
                   "unconverged_steps": rep["unconverged_steps"], "pad_cells": rep["pad_cells"],
                   "gradient_bound": rep["gradient_bound"], "model_invariants": inv,
                   "v_at_x0": float(fld(g.t0, self.model.x0))}
        checks = {"terminal_exact": check(bool(np.array_equal(fld.v[-1], phi)), True, "=="),
                  "finite": check(bool(np.all(np.isfinite(fld.v))), True, "==")}
        if self.model.coefficients.is_at_least("b", "holder"):
            checks["picard_converged"] = check(int(rep["unconverged_steps"]), 0, "==")
        else:
            # a drift that jumps in y has no exact discrete fixed point at the
            # crossing node; Picard settles into a bounded two-state cycle there
            bound = float(self.p("field").get("max_residual", 1e-2))
            checks["picard_residual_bounded"] = check(rep["max_residual"], bound, "<=")
        tt, xx = np.meshgrid(g.t_nodes, g.x_nodes, indexing="ij")
        csv = {"t": tt, "x": xx, "v": fld.v, "v_x": fld.v_x, "v_xx": fld.v_xx}
        return results, checks, csv

    def stage_field_oracle(self):
        from .oracles import worked_example_field
        if self.model.name != "worked_example":
            raise ConfigInvalid("field_oracle: a quadrature oracle exists only for the "
                                "worked_example model")
        par = self.p("field_oracle")
        tol = float(par.get("tol", 1e-3))
        g = self.grid
        orc = worked_example_field(g.t_nodes, g.x_nodes, sigmoid, g.T)
        err = np.abs(self.field.v - orc)
        results = {"sup_error": float(err.max()), "sup_error_t0": float(err[0].max()),
                   "oracle": "Gauss-Hermite quadrature, 80 nodes"}
        csv = {"x": g.x_nodes, "v_t0": self.field.v[0], "oracle_t0": orc[0], "error_t0": err[0]}
        return results, {"sup_error": check(results["sup_error"], tol, "<=")}, csv

    def stage_simulate(self):
        ens = self.ensemble
        X = ens.X
        results = {"summary": ens.summary(), "noise_sanity": ens.noise_sanity(),
                   "t_rec": ens.t_rec}
        checks = {"finite": check(bool(np.all(np.isfinite(X))), True, "=="),
                  "starts_at_x0": check(bool(np.all(X[:, 0] == ens.x0)), True, "==")}
        csv = {"t": ens.t_rec, "mean": X.mean(axis=0), "var": X.var(axis=0, ddof=1),
               "min": X.min(axis=0), "max": X.max(axis=0)}
        return results, checks, csv

    def _samples(self, variable, t):
        tr = self.triple
        r = int(np.searchsorted(tr.ensemble.rec_idx, self.step_of(t)))
        arr = {"X": tr.X, "Y": tr.Y, "Z": tr.Z}.get(variable)
        if arr is None:
            raise ConfigInvalid(f"unknown variable {variable!r}; use X, Y or Z")
        return arr[:, r]

    def stage_density(self):
        from .density import kde
        par = self.p("density")
        t = float(par.get("t", self.model.T))
        var = par.get("variable", "X")
        est = kde(self._samples(var, t), par.get("bandwidth", "silverman"),
                  n_probe=int(par.get("n_probe", 512)), bootstrap=int(par.get("bootstrap", 20)),
                  seed=self.seed)
        results = {"variable": var, "t": t, "bandwidth": est.bandwidth, "mass": est.mass,
                   "n_samples": est.n_samples}
        checks = {"mass": check(est.mass, [0.98, 1.02], "in")}
        return results, checks, {"x": est.probe, "density": est.density, "stderr": est.stderr}

    def _bounds(self, which):
        from . import density as dl
        par = self.p(which)
        t = float(par.get("t", 0.5 * (self.model.t0 + self.model.T)))
        self._samples("X", t)  # validates t against the recorded columns
        kw = {"K": par.get("K")}
        if "constants" in par:
            kw["constants"] = par["constants"]
        try:
            if which == "bounds_X":
                rep = dl.density_bounds_X(self.triple, self.model, t, **kw)
            elif which == "bounds_Y":
                rep = dl.density_bounds_Y(self.triple, self.field, self.model, t, **kw)
            else:
                kw.pop("constants", None)
                rep = dl.density_bounds_Z(self.triple, self.field, self.model, t, **kw)
        except Degenerate as exc:
            results = {"degenerate": str(exc), "t": t}
            return results, {"certified": check(False, True, "==")}, None
        max_v = float(par.get("max_violation", 0.05))
        results = rep.to_dict()
        results["t"] = t
        checks = {"sandwich_violation_fraction":
                  check(rep.sandwich_violation_fraction, max_v, "<="),
                  "tail_violations": check(rep.tail_violations, 0, "==")}
        return results, checks, rep.csv_columns()

    def stage_bounds_X(self):
        return self._bounds("bounds_X")

    def stage_bounds_Y(self):
        return self._bounds("bounds_Y")

    def stage_bounds_Z(self):
        return self._bounds("bounds_Z")

    def stage_tail(self):
        from .density import tail_check
        par = self.p("tail")
        if "L" not in par:
            raise ConfigInvalid("tail: parameter L is required")
        t = float(par.get("t", self.model.T))
        s = self._samples(par.get("variable", "X"), t)
        rep = tail_check(s, float(par["L"]), n_se=float(par.get("n_se", 3.0)))
        results = {"t": t, "L": float(par["L"]), **rep}
        return results, {"tail_violations": check(int(rep["n_violations"]), 0, "==")}, None

    def stage_comonotone(self):
        from .feynman_kac import comonotonicity_check
        if self.model2 is None:
            raise ConfigInvalid("comonotone: the config needs model2")
        par = self.p("comonotone")
        tol = float(par.get("tol", 1e-8))
        expect = par.get("expect", "comonotone")
        if expect not in ("comonotone", "anti"):
            raise ConfigInvalid("comonotone: expect must be 'comonotone' or 'anti'")
        rep = comonotonicity_check(self.model, self.model2, self.grid, self.n_paths, self.seed,
                                   self.n_steps, tol, self.solver, threads=self.threads)
        if expect == "comonotone":
            c = {"min_product": check(rep["min_product"], -tol, ">=")}
        else:
            c = {"max_product": check(rep["max_product"], tol, "<=")}
        rep["expect"] = expect
        return rep, c, None

    def stage_malliavin(self):
        from .feynman_kac import forward_drift, sigma_spec
        from .malliavin import interpolation_tolerance, malliavin_backward, malliavin_forward
        from .sde import simulate_forward
        par = self.p("malliavin")
        h = float(par.get("h", 1e-4))
        fld, ens, tr = self.field, self.ensemble, self.triple
        sample = malliavin_forward(ens, fld, self.model, route=par.get("route", "auto"))
        malliavin_backward(tr, fld, sample, self.model)
        cols = sample.s_pos
        diag = np.concatenate([np.abs(sample.DY[:, a, i] - tr.Z[:, i])
                               for a, i in enumerate(cols)])
        tol_i = interpolation_tolerance(fld)
        last = len(ens.rec_idx) - 1
        DX0T = sample.DX(0, last)
        DY0T = sample.DY[:, 0, last]
        bt, sig = forward_drift(fld, self.model), sigma_spec(self.model)

        def endpoint(x):
            e = simulate_forward(bt, sig, x, self.mc_grid, self.n_paths, self.seed,
                                 record="final", stream=self.stream, threads=self.threads)
            return e.X_T

        up, dn = endpoint(self.model.x0 + h), endpoint(self.model.x0 - h)
        fd_x = float(np.mean((up - dn) / (2.0 * h)))
        T = np.full(up.shape, self.model.T)
        fd_y = float(np.mean((fld.interp_v(T, up) - fld.interp_v(T, dn)) / (2.0 * h)))
        rel_x = abs(float(DX0T.mean()) - fd_x) / abs(fd_x)
        rel_y = abs(float(DY0T.mean()) - fd_y) / max(abs(fd_y), 1e-300)
        results = {"diagonal_mean_abs": float(diag.mean()), "interpolation_tolerance": tol_i,
                   "DX_0T_mean": float(DX0T.mean()), "fd_DX_0T_mean": fd_x,
                   "DY_0T_mean": float(DY0T.mean()), "fd_DY_0T_mean": fd_y,
                   "relative_error_DX": rel_x, "relative_error_DY": rel_y, "h": h,
                   "min_DX": float(np.min(sample.DX_array()[:, 0, :]))}
        checks = {"diagonal": check(results["diagonal_mean_abs"], 2.0 * tol_i, "<="),
                  "fd_flow_DX": check(rel_x, 0.01, "<="),
                  "fd_flow_DY": check(rel_y, 0.01, "<="),
                  "DX_positive": check(results["min_DX"], 0.0, ">")}
        csv = {"t": tr.t_rec, "mean_DX_0t": sample.DX_array()[:, 0, :].mean(axis=0),
               "mean_DY_0t": sample.DY[:, 0, :].mean(axis=0)}
        return results, checks, csv

    def stage_localtime(self):
        from .local_time import level_local_time, spacetime_local_time_integral
        from .oracles import brownian_local_time_mean
        from .sde import simulate_forward
        par = self.p("localtime")
        M = int(par.get("n_steps", 1024))
        n = int(par.get("n_paths", self.n_paths))
        T0, T = self.model.t0, self.model.T
        x0 = self.model.x0
        horizon = T - T0
        fine_g = SpaceTimeGrid(T0, T, 2 * M, x0 - 10.0, x0 + 10.0, 10)
        coarse_g = SpaceTimeGrid(T0, T, M, x0 - 10.0, x0 + 10.0, 10)
        kw = dict(record="final", stream=self.stream, threads=self.threads)
        coarse = simulate_forward(None, 1.0, x0, coarse_g, n, self.seed, noise_substeps=2, **kw)
        fine = simulate_forward(None, 1.0, x0, fine_g, n, self.seed, **kw)

        def phi(s, z):
            return np.asarray(z, float) - x0

        rc = spacetime_local_time_integral(phi, coarse)
        rf = spacetime_local_time_integral(phi, fine)
        rms_c = float(np.sqrt(np.mean((rc.values + horizon) ** 2)))
        rms_f = float(np.sqrt(np.mean((rf.values + horizon) ** 2)))
        order = math.log2(rms_c / rms_f)
        z = (rc.value + horizon) / rc.stderr
        X, _ = coarse.replay(0, min(n, int(par.get("level_paths", 2000))))
        lt = level_local_time(X, x0, coarse.dt)
        results = {"decomposition": rc.summary(), "target": -horizon, "z_score": z,
                   "rms_coarse": rms_c, "rms_fine": rms_f, "measured_order": order,
                   "n_steps": [M, 2 * M],
                   "level_local_time": {**lt.summary(),
                                        "exact_mean": brownian_local_time_mean(horizon),
                                        "asserted": False}}
        checks = {"mean_within_4se": check(abs(z), 4.0, "<="),
                  "rms_order": check(order, 0.4, ">=")}
        return results, checks, None

    def _zvonkin_drift(self, spec, grid):
        from .feynman_kac import forward_drift
        from .pde import GridFunction, transformed_drift
        kind = spec.get("type", "field")
        tt, xx = np.meshgrid(grid.t_nodes, grid.x_nodes, indexing="ij")
        if kind == "const":
            c = float(spec["c"])
            return GridFunction(grid, np.full(grid.shape, c)), ("affine", c, 0.0)
        if kind == "two_level":
            c1, c2 = float(spec["c1"]), float(spec["c2"])
            R, w = float(spec.get("R", 0.0)), float(spec.get("width", 0.0))
            if w > 0:
                s = np.clip((xx - R) / w + 0.5, 0.0, 1.0)
            else:
                s = (xx >= R).astype(float)
            gf = GridFunction(grid, c1 + (c2 - c1) * s)
            return gf, gf
        if kind == "field":
            if self.grid != grid:
                raise ConfigInvalid("zvonkin: the field drift lives on the main grid")
            gf = transformed_drift(self.field, self.model)
            return gf, forward_drift(self.field, self.model)
        raise ConfigInvalid(f"zvonkin: unknown drift type {kind!r}")

    def stage_zvonkin(self):
        from .feynman_kac import sigma_spec
        from .zvonkin import build_transform, correspondence_check, transformed_coefficients
        par = self.p("zvonkin")
        spec = par.get("drift", {"type": "field"})
        g = self.grid
        sig = sigma_spec(self.model)
        if not np.isscalar(sig):
            raise ConfigInvalid("zvonkin: the correspondence check needs a constant sigma")
        table, sim_drift = self._zvonkin_drift(spec, g)
        tr = build_transform(table, float(sig), g, float(par.get("mu_initial", 1.0)),
                             cfg=self.solver)
        co = transformed_coefficients(tr, float(sig))
        M = int(par.get("n_steps", 1024))
        n = int(par.get("n_paths", self.n_paths))
        stride = int(par.get("record_stride", max(M // 16, 1)))
        res = {}
        for steps, sub in ((M, 2), (2 * M, 1)):
            mg = SpaceTimeGrid(g.t0, g.T, steps, g.x_min, g.x_max, g.J)
            rec = stride * (steps // M)
            r = correspondence_check(sim_drift, float(sig), self.model.x0, tr, co, mg, n,
                                     self.seed, stream=self.stream, threads=self.threads,
                                     record=rec, noise_substeps=sub)
            res[steps] = {k: v for k, v in r.items() if k not in ("X", "X_tilde", "pathwise_rms")}
        ratio = res[M]["pathwise_rms_sup"] / res[2 * M]["pathwise_rms_sup"] \
            if res[2 * M]["pathwise_rms_sup"] > 0 else float("nan")
        results = {"transform": tr.summary(), "coefficients": co.summary(),
                   "round_trip_error": tr.round_trip_error(),
                   "correspondence": {str(k): v for k, v in res.items()},
                   "rms_ratio": ratio, "drift": spec}
        fine = res[2 * M]
        checks = {"sup_DU": check(tr.sup_DU, 0.5, "<="),
                  "round_trip": check(results["round_trip_error"], 1e-10, "<="),
                  "ks_fine": check(fine["ks_statistic"], fine["ks_critical_1pct"], "<")}
        if par.get("assert_refinement", spec.get("type") == "const"):
            checks["rms_halving"] = check(ratio, [1.4, 2.6], "in")
        csv = {"x": g.x_nodes, "U_t0": tr.U[0], "DU_t0": tr.DU[0],
               "b1_t0": co.b1.values[0], "sigma1_t0": co.sigma1.values[0]}
        return results, checks, csv

    def stage_price(self):
        from .oracles import ramp_expectation
        from .pricing import (growth_audit, price_and_hedge, quadratic_growth_constant,
                              value_functions)
        if self.pair is None:
            raise ConfigInvalid("price: the model must be the pricing built-in")
        par = self.p("price")
        surf = price_and_hedge(self.pair, self.grid, self.solver)
        vf = value_functions(surf, float(par.get("nu", 0.0)))
        m0 = self.pair[0]
        ex = m0.extras
        mp = dict(self.cfg["model"].get("params", {}))
        g = self.grid
        zs = np.linspace(-5.0, 5.0, 41)
        audit = growth_audit(surf.gamma, ex["alpha_fn"], surf.C, g.t_nodes[::max(g.M // 10, 1)],
                             g.x_nodes[::max(g.J // 10, 1)], zs)
        results = {"diagnostics": surf.diagnostics, "residual": vf["residual"], "nu": vf["nu"],
                   "growth": audit, "C": surf.C.to_list(), "gamma": surf.gamma,
                   "p_at_x0": float(np.interp(m0.x0, g.x_nodes, surf.p[0])),
                   "growth_constant": quadratic_growth_constant(audit["alpha_sup"], surf.gamma)}
        checks = {"indifference_residual": check(vf["residual"], 1e-10, "<="),
                  "growth_bound": check(bool(audit["holds"]), True, "==")}
        payoff = mp.get("payoff")
        if payoff is None:
            checks["zero_claim"] = check(surf.diagnostics["sup_abs_p"], 1e-10, "<=")
        linear = (surf.C.is_real_line and audit["alpha_sup"] == 0.0
                  and mp.get("lam", 0.05) == mp.get("lam_hat", 0.1))
        if surf.C.is_real_line:
            checks["hedge_gap"] = check(surf.diagnostics["hedge_gap_sign_corrected"],
                                        surf.diagnostics["hedge_gap_tolerance"], "<=")
        if linear and payoff is not None and payoff.get("type") == "ramp":
            lam = float(mp.get("lam", 0.05))
            s = surf.sigma
            tau = g.T - g.t0
            orc = ramp_expectation(g.x_nodes - (lam + 0.5 * s * s) * tau, s * math.sqrt(tau),
                                   float(payoff.get("strike", 0.0)),
                                   float(payoff.get("width", 1.0)))
            err = float(np.max(np.abs(surf.p[0] - orc)))
            results["linear_oracle_error_t0"] = err
            checks["linear_oracle"] = check(err, float(par.get("oracle_tol", 1e-3)), "<=")
        return results, checks, surf.csv_columns()

    def stage_regime_switching(self):
        from .pricing import regime_switching_experiment
        if self.model.name != "regime_switching":
            raise ConfigInvalid("regime_switching: the model must be the regime_switching "
                                "built-in")
        par = self.p("regime_switching")
        rep, _, _ = regime_switching_experiment(
            self.model, self.grid, self.n_paths, self.seed, mc_steps=self.n_steps,
            t_probe=float(par.get("t", 0.5 * self.model.T)), fd_h=float(par.get("h", 1e-3)),
            cfg=self.solver, record_stride=self.stride, threads=self.threads)
        checks = {"drift_levels_per_slice": check(rep["drift_levels_per_slice_max"], 2, "<=")}
        return rep, checks, None


def summarize(directory):
    """Merge the stage reports of an experiment directory into ``summary.json``.

    Raises
    ------
    MissingReports
        If the directory holds no stage report.
    """
    reports = io.stage_reports(directory)
    stages = [s for s in STAGE_ORDER if s in reports] + sorted(set(reports) - set(STAGE_ORDER))
    checks = []
    seeds = set()
    mu = {}
    constants = {}
    grids = {}
    for s in stages:
        r = reports[s]
        for name, c in sorted(r.get("checks", {}).items()):
            checks.append({"stage": s, "check": name, "pass": c["pass"], "value": c["value"],
                           "threshold": c["threshold"], "relation": c["relation"]})
        if r.get("seed") is not None:
            seeds.add(r["seed"])
        grids[s] = r.get("grid")
        res = r.get("results", {})
        if "transform" in res:
            mu[s] = {"mu": res["transform"]["mu"], "sup_DU": res["transform"]["sup_DU"]}
        if "constants" in res:
            constants[s] = res["constants"]
        for k in ("bounds_X", "bounds_Y"):
            if isinstance(res.get(k), dict) and "constants" in res[k]:
                constants[f"{s}.{k}"] = res[k]["constants"]
    summary = {"experiment": Path(directory).name, "versions": versions(),
               "stages": {s: reports[s].get("pass") for s in stages},
               "checks": checks, "seeds": sorted(seeds), "grids": grids, "mu": mu,
               "constants": constants, "all_pass": all(c["pass"] for c in checks)}
    io.write_json(Path(directory) / io.SUMMARY, summary)
    return summary
