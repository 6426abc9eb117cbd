"""Density estimates, Gaussian sandwich bounds and tail bounds.

For a Malliavin-differentiable F with l <= int_0^t D_sF E[D_sF | F_s] ds <= L,

    E|F - EF| / (2L) exp(-(x - EF)^2 / (2l)) <= rho_F(x)
                                            <= E|F - EF| / (2l) exp(-(x - EF)^2 / (2L)),
    P(F >= EF + y) <= exp(-y^2 / (2L)),   P(F <= EF - y) <= exp(-y^2 / (2L)).

The (l, L) pairs for X, Y and Z are assembled from model metadata and from
the solved field over the region occupied by the paths:

    X:  l = C(Lam, lam) t e^{-2Kt},          L = C(Lam) t e^{2Kt},
    Y:  l = C(Lam, lam) t (alpha e^{-Kt})^2, L = C(Lam) t (Ups e^{Kt})^2,
    Z:  l = t (omega e^{-Kt})^2,             L = t (Ups1 e^{Kt})^2,

with C(Lam) = Lam^2 and C(Lam, lam) = lam^2 / Lam^2 by default.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .estimators import BinnedRegressor, GaussianKDE
from .exceptions import BadBounds, Degenerate, MissingDerivatives, MissingSecondDerivatives


@dataclass
class DensityEstimate:
    """Density values on a probe grid."""

    probe: np.ndarray
    density: np.ndarray
    bandwidth: float
    n_samples: int
    estimator: str
    stderr: np.ndarray = None
    extras: dict = field(default_factory=dict)

    @property
    def mass(self):
        return float(np.trapezoid(self.density, self.probe))


def kde(samples, bandwidth_rule="silverman", probe=None, n_probe=512, bootstrap=20, seed=0):
    """Gaussian KDE on a probe grid spanning the sample range +- 3 bandwidths.

    Raises
    ------
    TooFewSamples
        Fewer than 1000 samples.
    DegenerateSamples
        Zero bandwidth (all samples equal).
    """
    est = GaussianKDE(bandwidth=bandwidth_rule, bootstrap=bootstrap, random_state=seed)
    est.fit(samples)
    if probe is None:
        probe = np.linspace(*est.support, n_probe)
    probe = np.asarray(probe, float)
    return DensityEstimate(probe, est.score_samples(probe), est.bandwidth_, est.n_samples_,
                           "kde", est.stderr(probe), {"model": est})


def envelopes(x, l, L, mean, mad):
    """Lower and upper Gaussian envelopes with E|F - EF| = ``mad``."""
    d2 = (np.asarray(x, float) - mean) ** 2
    lower = mad / (2.0 * L) * np.exp(-d2 / (2.0 * l))
    upper = mad / (2.0 * l) * np.exp(-d2 / (2.0 * L))
    return lower, upper


@dataclass
class BoundReport:
    """Envelope and tail audit for one random variable."""

    l: float
    L: float
    mean_F: float
    mad_F: float
    probe: np.ndarray
    kde: np.ndarray
    kde_stderr: np.ndarray
    lower_env: np.ndarray
    upper_env: np.ndarray
    sandwich_violation_fraction: float
    tail: dict
    constants: dict = field(default_factory=dict)

    @property
    def tail_violations(self):
        return int(self.tail["n_violations"])

    def to_dict(self):
        return {"l": self.l, "L": self.L, "mean_F": self.mean_F, "mad_F": self.mad_F,
                "sandwich_violation_fraction": self.sandwich_violation_fraction,
                "tail_violations": self.tail_violations, "tail": _jsonable(self.tail),
                "constants": _jsonable(self.constants), "n_probe": int(len(self.probe))}

    def csv_columns(self):
        return {"x": self.probe, "kde": self.kde, "lower": self.lower_env,
                "upper": self.upper_env}


def _jsonable(d):
    out = {}
    for k, v in d.items():
        if isinstance(v, np.ndarray):
            out[k] = v.tolist()
        elif isinstance(v, (np.floating, np.integer, np.bool_)):
            out[k] = v.item()
        elif isinstance(v, dict):
            out[k] = _jsonable(v)
        else:
            out[k] = v
    return out


def default_probe(samples, n_probe=201, q=0.001):
    """Probe grid between the q and 1 - q sample quantiles."""
    lo, hi = np.quantile(samples, [q, 1.0 - q])
    return np.linspace(lo, hi, n_probe)


def gaussian_sandwich_check(samples, l, L, mean=None, probe=None, n_probe=201, bootstrap=20,
                            seed=0, est=None, tail=True):
    """Fraction of probe points where the KDE leaves [lower (1 - eta), upper (1 + eta)].

    eta is three pointwise bootstrap standard errors relative to the KDE value.
    ``mean`` defaults to the sample mean; E|F - EF| is always the sample value.

    Raises
    ------
    BadBounds
        If l <= 0 or l > L.
    """
    l = float(l)
    L = float(L)
    if not (0.0 < l <= L):
        raise BadBounds(f"need 0 < l <= L, got l={l}, L={L}")
    x = np.asarray(samples, float).ravel()
    m = float(x.mean()) if mean is None else float(mean)
    mad = float(np.mean(np.abs(x - x.mean())))
    if est is None:
        est = GaussianKDE(bootstrap=bootstrap, random_state=seed).fit(x)
    probe = default_probe(x, n_probe) if probe is None else np.asarray(probe, float)
    dens = est.score_samples(probe)
    se = est.stderr(probe)
    lower, upper = envelopes(probe, l, L, m, mad)
    eta = np.where(dens > 0.0, 3.0 * se / np.maximum(dens, 1e-300), np.inf)
    ok = (dens >= lower * (1.0 - eta)) & (dens <= upper * (1.0 + eta))
    tails = tail_check(x, L, m) if tail else {"n_violations": 0}
    return BoundReport(l, L, m, mad, probe, dens, se, lower, upper, float(1.0 - ok.mean()), tails,
                       {"bandwidth": est.bandwidth_, "n_samples": int(x.size)})


def tail_check(samples, L, mean=None, ks=None, n_se=3.0):
    """Empirical two-sided tails at mean +- k sqrt(L) against exp(-k^2 / 2).

    A probe is a violation when the empirical probability exceeds the bound
    by more than ``n_se`` binomial standard errors of the bound.
    """
    if L <= 0:
        raise BadBounds("L must be positive")
    x = np.asarray(samples, float).ravel()
    n = x.size
    m = float(x.mean()) if mean is None else float(mean)
    ks = np.arange(0.5, 4.01, 0.5) if ks is None else np.asarray(ks, float)
    s = math.sqrt(L)
    xs = np.sort(x)
    upper_emp = 1.0 - np.searchsorted(xs, m + ks * s, side="left") / n
    lower_emp = np.searchsorted(xs, m - ks * s, side="right") / n
    bound = np.exp(-0.5 * ks ** 2)
    tol = n_se * np.sqrt(bound * (1.0 - bound) / n)
    up_v = upper_emp > bound + tol
    lo_v = lower_emp > bound + tol
    return {"k": ks, "bound": bound, "upper_empirical": upper_emp, "lower_empirical": lower_emp,
            "upper_violation": up_v, "lower_violation": lo_v,
            "n_violations": int(up_v.sum() + lo_v.sum()), "L": float(L), "mean": m}


def C_Lambda(Lam):
    return Lam ** 2


def C_Lambda_lambda(Lam, lam):
    return lam ** 2 / Lam ** 2


def _column(triple, t):
    pos = int(np.argmin(np.abs(triple.t_rec - t)))
    if not np.isclose(triple.t_rec[pos], t, atol=1e-12 + 1e-9 * abs(t)):
        raise ValueError(f"time {t} is not a recorded column")
    return pos


def _model_constants(model, K):
    c = model.coefficients
    if K is None:
        if c.lipschitz_K is None:
            raise MissingDerivatives("a bound K on the weak derivative of b~ is required")
        K = c.lipschitz_K
    return float(c.growth_Lambda), float(c.ellipticity_lambda), float(K)


def density_bounds_X(triple, model, t, K=None, constants=None, **kw):
    """Envelope and tail audit for X_t with l = C(Lam,lam) t e^{-2Kt}, L = C(Lam) t e^{2Kt}."""
    Lam, lam, K = _model_constants(model, K)
    cL, cLl = _constant_pair(Lam, lam, constants)
    tau = t - triple.t_rec[0]
    l = cLl * tau * math.exp(-2.0 * K * tau)
    L = cL * tau * math.exp(2.0 * K * tau)
    rep = gaussian_sandwich_check(triple.X[:, _column(triple, t)], l, L, **kw)
    rep.constants.update({"Lambda": Lam, "lambda": lam, "K": K, "C_Lambda": cL,
                          "C_Lambda_lambda": cLl, "t": float(t)})
    return rep


def _constant_pair(Lam, lam, constants):
    constants = constants or {}
    return (float(constants.get("C_Lambda", C_Lambda(Lam))),
            float(constants.get("C_Lambda_lambda", C_Lambda_lambda(Lam, lam))))


def occupied_extrema(fld, triple, arr, upto=None, rel_tol=1e-10):
    """min |arr| at each recorded time and the global max |arr|, over the path range.

    Grid nodes inside [min X_s, max X_s] (plus the bracketing nodes) count as
    occupied.  Returns (min_by_time, global_max, sign_change_by_time).
    """
    g = fld.grid
    x = g.x_nodes
    mins = []
    signs = []
    gmax = 0.0
    cols = range(len(triple.t_rec)) if upto is None else range(upto + 1)
    for r in cols:
        t = triple.t_rec[r]
        i = int(np.argmin(np.abs(g.t_nodes - t)))
        lo, hi = triple.X[:, r].min(), triple.X[:, r].max()
        j0 = max(int(np.searchsorted(x, lo, side="right")) - 1, 0)
        j1 = min(int(np.searchsorted(x, hi, side="left")), g.J)
        seg = arr[i, j0:j1 + 1]
        mins.append(float(np.min(np.abs(seg))))
        signs.append(bool(seg.min() < 0.0 < seg.max()))
        gmax = max(gmax, float(np.max(np.abs(seg))))
    return np.array(mins), gmax, np.array(signs)


def density_bounds_Y(triple, fld, model, t, K=None, constants=None, **kw):
    """Envelope and tail audit for Y_t with field-extracted Ups and alpha(t).

    Raises
    ------
    Degenerate
        If |v_x| vanishes or changes sign on the occupied region at time t.
    """
    Lam, lam, K = _model_constants(model, K)
    cL, cLl = _constant_pair(Lam, lam, constants)
    r = _column(triple, t)
    mins, ups, signs = occupied_extrema(fld, triple, fld.v_x)
    alpha = mins[r]
    if signs[r] or alpha <= 1e-10 * max(ups, 1.0):
        raise Degenerate(f"min |v_x| = {alpha:.3g} on the occupied region at t={t}: "
                         "density bounds are not certified")
    tau = t - triple.t_rec[0]
    l = cLl * tau * (alpha * math.exp(-K * tau)) ** 2
    L = cL * tau * (ups * math.exp(K * tau)) ** 2
    rep = gaussian_sandwich_check(triple.Y[:, r], l, L, **kw)
    rep.constants.update({"Lambda": Lam, "lambda": lam, "K": K, "Upsilon": ups, "alpha_t": alpha,
                          "C_Lambda": cL, "C_Lambda_lambda": cLl, "t": float(t)})
    return rep


def density_bounds_Z(triple, fld, model, t, K=None, **kw):
    """Envelope and tail audit for Z_t (sigma = 1) with Ups1 = max |v_xx|, omega(t) = min |v_xx|.

    Raises
    ------
    Degenerate
        If v_xx vanishes or changes sign on the occupied region at time t.
    """
    _, _, K = _model_constants(model, K)
    r = _column(triple, t)
    mins, ups1, signs = occupied_extrema(fld, triple, fld.v_xx)
    omega = mins[r]
    if signs[r] or omega <= 1e-10 * max(ups1, 1.0):
        raise Degenerate(f"min |v_xx| = {omega:.3g} on the occupied region at t={t}: "
                         "density bounds are not certified")
    tau = t - triple.t_rec[0]
    l = tau * (omega * math.exp(-K * tau)) ** 2
    L = tau * (ups1 * math.exp(K * tau)) ** 2
    rep = gaussian_sandwich_check(triple.Z[:, r], l, L, **kw)
    rep.constants.update({"K": K, "Upsilon1": ups1, "omega_t": omega, "t": float(t)})
    return rep


def skorohod_weight(DF, s_nodes, T, W_T, DDF):
    """Per-path delta(c 1_[0,T]) = c W_T - int D_s c ds, c = (int D_sF ds)^{-1}.

    ``DDF`` is an array (n, S, S) of D_s D_u F or the scalar 0 when the
    second derivative is known to vanish.

    Raises
    ------
    MissingSecondDerivatives
        If ``DDF`` is None.
    """
    if DDF is None:
        raise MissingSecondDerivatives("the correction term needs D_s D_u F")
    DF = np.asarray(DF, float)
    w = np.diff(np.r_[np.asarray(s_nodes, float), float(T)])
    gamma = DF @ w
    c = 1.0 / gamma
    if np.isscalar(DDF) or np.ndim(DDF) == 0:
        if float(DDF) != 0.0:
            raise ValueError("a scalar DDF must be 0")
        corr = np.zeros_like(c)
    else:
        inner = np.einsum("psu,u->ps", np.asarray(DDF, float), w)
        Dc = -(c ** 2)[:, None] * inner
        corr = Dc @ w
    return c * np.asarray(W_T, float) - corr, c


def skorohod_density_representation(F, DF, s_nodes, T, W_T, DDF, bins=50, n_probe=2001,
                                    probe=None):
    """rho_F(x) = rho_F(x0) exp(-int_{x0}^x w(z) dz) with w(z) = E[delta | F = z].

    w is an equal-count bin regression of the Skorohod weight on F; the
    anchor x0 is the sample median and rho_F(x0) is fixed by normalising the
    mass on the probe grid (default: the sample range).
    """
    F = np.asarray(F, float).ravel()
    delta, c = skorohod_weight(DF, s_nodes, T, W_T, DDF)
    reg = BinnedRegressor(n_bins=bins).fit(F, delta)
    if probe is None:
        probe = np.linspace(F.min(), F.max(), n_probe)
    probe = np.asarray(probe, float)
    x0 = float(np.median(F))
    wv = reg.predict(probe)
    cum = np.concatenate([[0.0], np.cumsum(0.5 * (wv[1:] + wv[:-1]) * np.diff(probe))])
    cum -= np.interp(x0, probe, cum)
    logr = -cum
    dens = np.exp(logr - logr.max())
    dens /= np.trapezoid(dens, probe)
    return DensityEstimate(probe, dens, float("nan"), int(F.size), "representation",
                           extras={"w": reg, "anchor": x0, "c_mean": float(np.mean(c)),
                                   "bins": int(bins)})


def compare_representation(rep, samples, mass=0.9, bootstrap=20, seed=0):
    """Max deviation of the representation from the KDE in units of KDE standard error."""
    est = GaussianKDE(bootstrap=bootstrap, random_state=seed).fit(samples)
    lo, hi = np.quantile(samples, [(1 - mass) / 2, (1 + mass) / 2])
    sel = (rep.probe >= lo) & (rep.probe <= hi)
    x = rep.probe[sel]
    k = est.score_samples(x)
    se = np.maximum(est.stderr(x), 1e-300)
    z = np.abs(rep.density[sel] - k) / se
    return {"max_z": float(z.max()), "max_relative": float(np.max(np.abs(rep.density[sel] - k) / k))}
