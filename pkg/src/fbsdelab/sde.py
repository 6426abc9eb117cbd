"""Euler-Maruyama Monte Carlo for scalar SDEs with counter-based noise.

Paths are generated in fixed blocks of :data:`BLOCK` paths.  Blocks are
independent (noise is addressed by path index, see :mod:`fbsdelab.rng`), so
they can run on any number of threads and the result never changes.  Only
the requested time columns are stored; full paths and increments of any
block can be regenerated exactly with :meth:`PathEnsemble.replay`.
"""

import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from ._interp import table_eval
from .exceptions import NotBrownian
from .pde import GridFunction
from .rng import normal_pair, seed_key, standard_normals

BLOCK = 8192

_EMPTY_TAB = np.zeros((1, 2))


@dataclass(frozen=True)
class CoefSpec:
    """Normalised drift or diffusion: ``a + c x (+ table) `` or a callable."""

    kind: str  # "affine", "table" or "callable"
    a: float = 0.0
    c: float = 0.0
    table: GridFunction = None
    fn: object = None

    def __call__(self, t, x):
        x = np.asarray(x, float)
        if self.kind == "affine":
            return self.a + self.c * x
        if self.kind == "table":
            return self.table(np.broadcast_to(t, x.shape), x)
        return np.broadcast_to(np.asarray(self.fn(t, x), float), x.shape)

    @property
    def is_zero(self):
        return self.kind == "affine" and self.a == 0.0 and self.c == 0.0

    def is_const(self, value):
        return self.kind == "affine" and self.a == value and self.c == 0.0

    def describe(self):
        if self.kind == "affine":
            return {"kind": "affine", "a": self.a, "c": self.c}
        if self.kind == "table":
            return {"kind": "table", "grid": self.table.grid.to_dict()}
        return {"kind": "callable", "name": getattr(self.fn, "__name__", "fn")}


def as_coef(obj, default=0.0):
    """Normalise ``None``, a number, ``("affine", a, c)``, a GridFunction or a callable."""
    if isinstance(obj, CoefSpec):
        return obj
    if obj is None:
        return CoefSpec("affine", float(default), 0.0)
    if isinstance(obj, (int, float, np.floating)):
        return CoefSpec("affine", float(obj), 0.0)
    if isinstance(obj, tuple) and len(obj) == 3 and obj[0] == "affine":
        return CoefSpec("affine", float(obj[1]), float(obj[2]))
    if isinstance(obj, GridFunction):
        if obj.is_constant():
            return CoefSpec("affine", float(obj.values.flat[0]), 0.0)
        return CoefSpec("table", table=obj)
    if callable(obj):
        return CoefSpec("callable", fn=obj)
    raise TypeError(f"cannot interpret {type(obj).__name__} as a coefficient")


def _tab_args(spec):
    if spec.kind == "table":
        return (True,) + spec.table.table
    return (False, _EMPTY_TAB, _EMPTY_TAB, 0.0, 1.0, 0.0, 1.0)


@njit(cache=True, nogil=True)
def _euler_kernel(x0, k0, k1, stream, path_start, t0, dt, n_steps, sub,
                  ba, bc, b_tab, bv, bs, bt0, bdt, bx0, bdx,
                  sa, s_tab, sv, ss, st0, sdt, sx0, sdx,
                  rec_idx, x_lo, x_hi, out, exited):
    n = out.shape[0]
    sq = math.sqrt(dt / sub)
    for p in range(n):
        path = path_start + p
        x = x0[p]
        cached = -1
        zc = 0.0
        zs = 0.0
        r = 0
        if rec_idx[0] == 0:
            out[p, 0] = x
            r = 1
        left = False
        for m in range(n_steps):
            t = t0 + m * dt
            b = ba + bc * x
            if b_tab:
                b += table_eval(bv, bs, bt0, bdt, bx0, bdx, t, x)
            if s_tab:
                s = table_eval(sv, ss, st0, sdt, sx0, sdx, t, x)
            else:
                s = sa
            z = 0.0
            for k in range(sub):
                j = m * sub + k
                if (j >> 1) != cached:
                    cached = j >> 1
                    zc, zs = normal_pair(k0, k1, stream, path, cached)
                z += zs if j & 1 else zc
            x = x + b * dt + s * sq * z
            if x < x_lo or x > x_hi:
                left = True
            if r < rec_idx.shape[0] and rec_idx[r] == m + 1:
                out[p, r] = x
                r += 1
        exited[p] = left


@njit(cache=True, nogil=True)
def _euler_full_kernel(x0, k0, k1, stream, path_start, t0, dt, n_steps, sub,
                       ba, bc, b_tab, bv, bs, bt0, bdt, bx0, bdx,
                       sa, s_tab, sv, ss, st0, sdt, sx0, sdx, X, dW):
    n = X.shape[0]
    sq = math.sqrt(dt / sub)
    for p in range(n):
        path = path_start + p
        x = x0[p]
        cached = -1
        zc = 0.0
        zs = 0.0
        X[p, 0] = x
        for m in range(n_steps):
            t = t0 + m * dt
            b = ba + bc * x
            if b_tab:
                b += table_eval(bv, bs, bt0, bdt, bx0, bdx, t, x)
            if s_tab:
                s = table_eval(sv, ss, st0, sdt, sx0, sdx, t, x)
            else:
                s = sa
            z = 0.0
            for k in range(sub):
                j = m * sub + k
                if (j >> 1) != cached:
                    cached = j >> 1
                    zc, zs = normal_pair(k0, k1, stream, path, cached)
                z += zs if j & 1 else zc
            dw = sq * z
            dW[p, m] = dw
            x = x + b * dt + s * dw
            X[p, m + 1] = x


@dataclass
class PathEnsemble:
    """Monte Carlo paths of a scalar SDE on a uniform time grid.

    Attributes
    ----------
    X : ndarray, shape (n_paths, len(rec_idx))
        Recorded states; column ``r`` is time ``t_rec[r]``.
    rec_idx : ndarray of int
        Recorded step indices (always contains 0 and n_steps).
    seed, stream, path_offset, noise_substeps : int
        Noise address.  Path ``p`` uses noise path index ``path_offset + p``
        and step ``m`` sums fine normals ``m * noise_substeps + k``.
    """

    X: np.ndarray
    rec_idx: np.ndarray
    t0: float
    T: float
    n_steps: int
    seed: int
    stream: int
    x0: np.ndarray
    drift: CoefSpec
    sigma: CoefSpec
    path_offset: int = 0
    noise_substeps: int = 1
    x_range: tuple = (-np.inf, np.inf)
    exit_fraction: float = 0.0
    scheme: dict = field(default_factory=lambda: {"name": "euler-maruyama"})

    @property
    def n_paths(self):
        return self.X.shape[0]

    @property
    def dt(self):
        return (self.T - self.t0) / self.n_steps

    @property
    def t_nodes(self):
        return np.linspace(self.t0, self.T, self.n_steps + 1)

    @property
    def t_rec(self):
        return self.t_nodes[self.rec_idx]

    @property
    def full(self):
        return len(self.rec_idx) == self.n_steps + 1

    def column(self, step):
        """Recorded values at step index ``step``."""
        pos = np.searchsorted(self.rec_idx, step)
        if pos >= len(self.rec_idx) or self.rec_idx[pos] != step:
            raise KeyError(f"step {step} was not recorded")
        return self.X[:, pos]

    @property
    def X_T(self):
        return self.X[:, -1]

    def is_brownian(self):
        return self.drift.is_zero and self.sigma.is_const(1.0)

    def replay(self, start=0, count=None):
        """Regenerate full paths and increments for paths ``[start, start + count)``.

        Returns ``(X, dW)`` of shapes ``(count, n_steps + 1)`` and ``(count, n_steps)``;
        the values are identical to those behind the recorded columns.
        """
        count = self.n_paths - start if count is None else count
        x0 = np.ascontiguousarray(self.x0[start:start + count])
        return _simulate_full(self.drift, self.sigma, x0, self.t0, self.T, self.n_steps,
                              self.seed, self.stream, self.path_offset + start,
                              self.noise_substeps)

    def iter_blocks(self, block=BLOCK):
        for start in range(0, self.n_paths, block):
            count = min(block, self.n_paths - start)
            yield start, self.replay(start, count)

    @property
    def dW(self):
        """All increments, shape ``(n_paths, n_steps)`` (regenerated on access)."""
        return self.replay()[1]

    def noise_sanity(self, max_paths=100_000):
        """Column mean and variance gate on the increments (warns, never fails)."""
        n = min(self.n_paths, max_paths)
        dW = self.replay(0, n)[1]
        dt = self.dt
        mean_ok = np.abs(dW.mean(axis=0)) <= 5.0 * math.sqrt(dt / n)
        var_ok = np.abs(dW.var(axis=0) - dt) <= 5.0 * dt * math.sqrt(2.0 / n)
        frac = float(np.mean(mean_ok & var_ok))
        if frac < 0.99:
            warnings.warn(f"noise sanity gate: only {frac:.3f} of columns pass", RuntimeWarning,
                          stacklevel=2)
        return {"columns_passing": frac, "n_checked": int(n)}

    def summary(self):
        xt = self.X_T
        return {"n_paths": int(self.n_paths), "n_steps": int(self.n_steps), "seed": int(self.seed),
                "stream": int(self.stream), "t0": self.t0, "T": self.T,
                "mean_X_T": float(xt.mean()), "var_X_T": float(xt.var(ddof=1)) if len(xt) > 1 else 0.0,
                "min_X_T": float(xt.min()), "max_X_T": float(xt.max()),
                "exit_fraction": float(self.exit_fraction), "scheme": dict(self.scheme),
                "drift": self.drift.describe(), "sigma": self.sigma.describe()}


def _normalise_record(record, n_steps):
    if record in ("all", None):
        idx = np.arange(n_steps + 1)
    elif record == "final":
        idx = np.array([0, n_steps])
    elif isinstance(record, (int, np.integer)):
        idx = np.unique(np.r_[np.arange(0, n_steps + 1, int(record)), n_steps])
    else:
        idx = np.unique(np.r_[0, np.asarray(record, dtype=np.int64), n_steps])
    if idx.min() < 0 or idx.max() > n_steps:
        raise ValueError("recorded steps out of range")
    return idx.astype(np.int64)


def _simulate_full(drift, sigma, x0, t0, T, n_steps, seed, stream, path_start, sub):
    n = x0.shape[0]
    dt = (T - t0) / n_steps
    X = np.empty((n, n_steps + 1))
    dW = np.empty((n, n_steps))
    if drift.kind != "callable" and sigma.kind != "callable":
        k0, k1 = seed_key(seed)
        _euler_full_kernel(x0, k0, k1, stream, path_start, t0, dt, n_steps, sub,
                           drift.a, drift.c, *_tab_args(drift), sigma.a, *_tab_args(sigma),
                           X, dW)
        return X, dW
    X[:, 0] = x0
    x = x0.copy()
    for m in range(n_steps):
        z = standard_normals(seed, path_start, n, m * sub, sub, stream).sum(axis=1)
        dw = math.sqrt(dt / sub) * z
        t = t0 + m * dt
        x = x + drift(t, x) * dt + sigma(t, x) * dw
        X[:, m + 1] = x
        dW[:, m] = dw
    return X, dW


def _run_block(drift, sigma, x0, t0, T, n_steps, seed, stream, path_start, sub, rec_idx, x_range):
    n = x0.shape[0]
    out = np.empty((n, len(rec_idx)))
    exited = np.zeros(n, dtype=np.bool_)
    if drift.kind != "callable" and sigma.kind != "callable":
        k0, k1 = seed_key(seed)
        dt = (T - t0) / n_steps
        _euler_kernel(x0, k0, k1, stream, path_start, t0, dt, n_steps, sub,
                      drift.a, drift.c, *_tab_args(drift), sigma.a, *_tab_args(sigma),
                      rec_idx, x_range[0], x_range[1], out, exited)
        return out, exited
    X, _ = _simulate_full(drift, sigma, x0, t0, T, n_steps, seed, stream, path_start, sub)
    exited[:] = np.any((X < x_range[0]) | (X > x_range[1]), axis=1)
    return X[:, rec_idx], exited


def simulate_forward(b_tilde, sigma, x0, grid, n_paths, seed, *, record="all", stream=0,
                     noise_substeps=1, path_offset=0, threads=1, block=BLOCK):
    """Euler-Maruyama paths of dX = b(t, X) dt + sigma(t, X) dW.

    Parameters
    ----------
    b_tilde, sigma
        ``None``, a constant, ``("affine", a, c)`` for ``a + c x``, a
        :class:`~fbsdelab.pde.GridFunction`, or a vectorised callable
        ``(t, x)``.  Tables are clamped outside their x range.
    x0 : float or array of length ``n_paths``
    grid : SpaceTimeGrid
        Time axis ``[t0, T]`` with ``M`` steps; its x range only feeds the
        exit statistics.
    n_paths : int
    seed : int
    record : {"all", "final"}, int or sequence of int
        Columns to keep: every step, only the endpoints, every ``record``-th
        step, or an explicit list of step indices.
    noise_substeps : int
        Each step uses the sum of this many consecutive fine normals, so a
        run with ``M`` steps and ``noise_substeps = k`` shares its Brownian
        path with a run with ``k M`` steps.
    threads : int
        Worker threads; the output does not depend on it.

    Returns
    -------
    PathEnsemble
    """
    if n_paths < 1:
        raise ValueError("n_paths must be >= 1")
    drift = as_coef(b_tilde, 0.0)
    sig = as_coef(sigma, 1.0)
    n_steps = int(grid.M)
    x0 = np.ascontiguousarray(np.broadcast_to(np.asarray(x0, float), (int(n_paths),)))
    rec_idx = _normalise_record(record, n_steps)
    x_range = (float(grid.x_min), float(grid.x_max))
    out = np.empty((int(n_paths), len(rec_idx)))
    exited = np.zeros(int(n_paths), dtype=np.bool_)
    starts = list(range(0, int(n_paths), int(block)))

    def job(s):
        c = min(int(block), int(n_paths) - s)
        o, e = _run_block(drift, sig, x0[s:s + c], grid.t0, grid.T, n_steps, seed, stream,
                          path_offset + s, int(noise_substeps), rec_idx, x_range)
        out[s:s + c] = o
        exited[s:s + c] = e

    if threads > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=int(threads)) as ex:
            list(ex.map(job, starts))
    else:
        for s in starts:
            job(s)
    return PathEnsemble(X=out, rec_idx=rec_idx, t0=float(grid.t0), T=float(grid.T),
                        n_steps=n_steps, seed=int(seed), stream=int(stream), x0=x0,
                        drift=drift, sigma=sig, path_offset=int(path_offset),
                        noise_substeps=int(noise_substeps), x_range=x_range,
                        exit_fraction=float(exited.mean()),
                        scheme={"name": "euler-maruyama", "drift_eval": "left endpoint",
                                "noise": "philox4x32-10 box-muller", "block": int(block)})


@dataclass
class ReversedEnsemble:
    """Time reversal of a Brownian ensemble with the auxiliary motion B.

    ``W_hat[:, m] = W[:, M - m]`` (started at 0), ``Wx_hat = x0 + W_hat`` and
    ``dB[:, m] = dW_hat[:, m] + W_hat[:, m] dt / (T - s_m)``.  With the last
    interval's integrand capped at ``s = T - dt`` the final increment is
    exactly 0.
    """

    W_hat: np.ndarray
    Wx_hat: np.ndarray
    dB: np.ndarray
    t_nodes: np.ndarray
    path_start: int = 0


def time_reversed_paths(ensemble, start=0, count=None):
    """Reverse a (block of a) pure Brownian ensemble and build dB.

    Raises
    ------
    NotBrownian
        If the ensemble has a drift or a diffusion other than 1.
    """
    if not ensemble.is_brownian():
        raise NotBrownian("time reversal is defined for zero-drift, unit-diffusion ensembles")
    X, _ = ensemble.replay(start, count)
    return _reverse_block(X, ensemble.x0[start:start + X.shape[0]], ensemble.t_nodes), X


def _reverse_block(X, x0, t_nodes):
    W = X - x0[:, None]
    W_hat = W[:, ::-1]
    Wx_hat = X[:, ::-1]
    T = t_nodes[-1]
    s = t_nodes - t_nodes[0]
    dt = s[1] - s[0]
    horizon = T - t_nodes[0]
    dW_hat = np.diff(W_hat, axis=1)
    rem = horizon - s[:-1]
    # the last interval [T - dt, T] is capped at s = T - dt
    rem = np.maximum(rem, dt)
    dB = dW_hat + W_hat[:, :-1] * dt / rem
    return ReversedEnsemble(W_hat=W_hat, Wx_hat=Wx_hat, dB=dB, t_nodes=t_nodes)


def girsanov_weight(ensemble, drift_fn, block=BLOCK):
    """Stochastic exponential exp(sum h dW - 1/2 sum h^2 dt) per path.

    ``drift_fn`` is evaluated at the left endpoint of each step, with the
    same conventions as the drift of :func:`simulate_forward`.
    """
    h = as_coef(drift_fn, 0.0)
    if h.is_zero:
        return np.ones(ensemble.n_paths)
    out = np.empty(ensemble.n_paths)
    t = ensemble.t_nodes
    dt = ensemble.dt
    for start, (X, dW) in ensemble.iter_blocks(block):
        acc = np.zeros(X.shape[0])
        for m in range(ensemble.n_steps):
            hm = h(t[m], X[:, m])
            acc += hm * dW[:, m] - 0.5 * hm * hm * dt
        out[start:start + X.shape[0]] = np.exp(acc)
    return out
