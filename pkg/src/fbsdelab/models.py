"""Declarative FBSDE models and the built-in model library.

A model is the quadruple (b, sigma, f, phi) of the coupled system

    dX = b(t, X, Y, Z) dt + sigma(t, X) dW,
    dY = -f(t, X, Y, Z) dt + Z dW,      Y_T = phi(X_T),

whose decoupling field v solves

    v_t + 1/2 sigma^2 v_xx + b(t, x, v, v_x) v_x + f(t, x, v, v_x) = 0.

Every coefficient is a vectorised numpy callable.  The ``z`` argument of
``drift_b`` and ``driver_f`` is the spatial gradient ``v_x`` of the field
(this is what the PDE sees); models whose driver is stated in terms of the
control ``Z = sigma * v_x`` do the conversion at construction.
"""

import json
import math
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Callable, Mapping, Optional

import numpy as np

from .exceptions import ConfigInvalid, InvalidInterval, MissingDerivatives

SMOOTHNESS_LEVELS = ("measurable", "holder", "lipschitz", "C1", "C2")

DERIVATIVE_NAMES = (
    "f_x", "f_y", "f_z", "f_xx", "f_xy", "f_xz", "f_yy", "f_yz", "f_zz",
    "phi_x", "phi_xx",
    "b_x", "b_y", "b_z", "b_t",
    "sigma_x", "sigma_t", "sigma_xx",
)


def _freeze(mapping):
    return MappingProxyType(dict(mapping or {}))


def _zero4(t, x, y, z):
    return np.zeros(np.broadcast(t, x, y, z).shape)


def _zero2(t, x):
    return np.zeros(np.broadcast(t, x).shape)


def _ell_zero(y):
    return np.zeros(np.shape(y))


@dataclass(frozen=True, eq=False)
class CoefficientSet:
    """Coefficients of a scalar FBSDE plus the constants of its hypotheses.

    Parameters
    ----------
    drift_b, driver_f : callable
        ``(t, x, y, z) -> array``; ``z`` is the field gradient.
    diffusion_sigma : callable
        ``(t, x) -> array``.
    terminal_phi : callable
        ``x -> array``.
    growth_Lambda, ellipticity_lambda, lipschitz_K : float
        Bound on |phi| and |f(., y, 0)|/(1+|y|), lower bound of sigma^2, and
        the Lipschitz-type constant of the drift.
    holder_exponents : mapping
        Keys ``theta`` (b in x), ``beta`` (phi) and ``alpha0``.
    ell : callable
        Locally bounded nondecreasing function controlling quadratic growth.
    smoothness_flags : mapping
        ``{"b": level, "sigma": level, "f": level, "phi": level}`` with levels
        from :data:`SMOOTHNESS_LEVELS`.
    optional_derivatives : mapping
        Named partial derivatives (see :data:`DERIVATIVE_NAMES`).  Operations
        that need one that is absent raise :class:`MissingDerivatives`.
    sigma_const : float, optional
        Set when sigma is a constant; enables fast paths and makes every sigma
        derivative identically zero.
    drift_affine : tuple, optional
        ``(a, c)`` when the drift is ``a + c x`` independent of (t, y, z).
    """

    drift_b: Callable
    diffusion_sigma: Callable
    driver_f: Callable
    terminal_phi: Callable
    growth_Lambda: float = 1.0
    ellipticity_lambda: float = 1.0
    lipschitz_K: float = 0.0
    holder_exponents: Mapping = field(
        default_factory=lambda: _freeze({"theta": 1.0, "beta": 1.0, "alpha0": 1.0}))
    ell: Callable = _ell_zero
    smoothness_flags: Mapping = field(
        default_factory=lambda: _freeze({"b": "C2", "sigma": "C2", "f": "C2", "phi": "C2"}))
    optional_derivatives: Mapping = field(default_factory=lambda: _freeze({}))
    sigma_const: Optional[float] = None
    drift_affine: Optional[tuple] = None
    metadata: Mapping = field(default_factory=lambda: _freeze({}))

    def __post_init__(self):
        for name in ("holder_exponents", "smoothness_flags", "optional_derivatives", "metadata"):
            object.__setattr__(self, name, _freeze(getattr(self, name)))
        for key, level in self.smoothness_flags.items():
            if level not in SMOOTHNESS_LEVELS:
                raise ValueError(f"unknown smoothness level {level!r} for {key}")
        unknown = set(self.optional_derivatives) - set(DERIVATIVE_NAMES)
        if unknown:
            raise ValueError(f"unknown derivative names {sorted(unknown)}")

    def has(self, name):
        if name.startswith("sigma_") and self.sigma_const is not None:
            return True
        if name in ("b_x", "b_y", "b_z", "b_t") and self.drift_affine is not None:
            return True
        return name in self.optional_derivatives

    def derivative(self, name):
        """Return the named partial derivative as a callable.

        Derivatives of a constant sigma and of an affine drift are supplied
        automatically.
        """
        if name in self.optional_derivatives:
            return self.optional_derivatives[name]
        if name.startswith("sigma_") and self.sigma_const is not None:
            return _zero2
        if self.drift_affine is not None and name in ("b_x", "b_y", "b_z", "b_t"):
            if name == "b_x":
                c = float(self.drift_affine[1])
                return lambda t, x, y, z: np.full(np.broadcast(t, x, y, z).shape, c)
            return _zero4
        raise MissingDerivatives(f"derivative {name!r} not supplied by the model")

    def is_at_least(self, key, level):
        return SMOOTHNESS_LEVELS.index(self.smoothness_flags.get(key, "measurable")) >= \
            SMOOTHNESS_LEVELS.index(level)

    def sigma_bounds(self, t, x):
        s = np.abs(np.broadcast_to(self.diffusion_sigma(t, x), np.broadcast(t, x).shape))
        return float(s.min()), float(s.max())

    def check_invariants(self, t_nodes, x_nodes, y_samples=None):
        """Audit the sampled hypotheses on a truncated domain.

        Returns a dict of booleans, one per invariant.
        """
        tt, xx = np.meshgrid(np.asarray(t_nodes, float), np.asarray(x_nodes, float), indexing="ij")
        sig = np.broadcast_to(self.diffusion_sigma(tt, xx), tt.shape)
        phi = self.terminal_phi(np.asarray(x_nodes, float))
        if y_samples is None:
            y_samples = np.linspace(-3.0, 3.0, 13)
        y_samples = np.asarray(y_samples, float)
        ok_f = True
        for y in y_samples:
            fy = np.broadcast_to(self.driver_f(tt, xx, y, 0.0), tt.shape)
            ok_f &= bool(np.all(np.abs(fy) <= self.growth_Lambda * (1.0 + abs(y)) + 1e-12))
        ell = np.asarray(self.ell(np.sort(y_samples)), float)
        return {
            "ellipticity": bool(np.all(sig ** 2 >= self.ellipticity_lambda - 1e-12)),
            "terminal_bound": bool(np.all(np.abs(phi) <= self.growth_Lambda + 1e-12)),
            "driver_growth": ok_f,
            "ell_nondecreasing": bool(np.all(np.diff(np.broadcast_to(ell, y_samples.shape)) >= 0)),
        }


@dataclass(frozen=True, eq=False)
class ModelInstance:
    """A coefficient set together with the initial point and horizon."""

    coefficients: CoefficientSet
    x0: float = 0.0
    horizon_T: float = 1.0
    t0: float = 0.0
    name: str = "custom"
    params: Mapping = field(default_factory=lambda: _freeze({}))
    extras: Mapping = field(default_factory=lambda: _freeze({}))

    def __post_init__(self):
        if not self.t0 < self.horizon_T:
            raise ValueError("start time must precede the horizon")
        object.__setattr__(self, "params", _freeze(self.params))
        object.__setattr__(self, "extras", _freeze(self.extras))

    @property
    def T(self):
        return self.horizon_T


def sigmoid(x):
    x = np.asarray(x, dtype=float)
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def builtin_worked_example(T=1.0, x0=0.0):
    """b = 0, sigma = 1, f(t, x, y, z) = y + z, phi = logistic sigmoid.

    Substituting v = e^{T-t} u turns the PDE into the drifted heat equation
    u_t + u_xx / 2 + u_x = 0, so that
    v(t, x) = e^{T-t} E[phi(x + (T - t) + W_{T-t})].
    """
    def phi_x(x):
        s = sigmoid(x)
        return s * (1.0 - s)

    def phi_xx(x):
        s = sigmoid(x)
        return s * (1.0 - s) * (1.0 - 2.0 * s)

    def one(t, x, y, z):
        return np.ones(np.broadcast(t, x, y, z).shape)

    derivs = {"f_x": _zero4, "f_y": one, "f_z": one, "f_xx": _zero4, "f_xy": _zero4,
              "f_xz": _zero4, "f_yy": _zero4, "f_yz": _zero4, "f_zz": _zero4,
              "phi_x": phi_x, "phi_xx": phi_xx}
    coeffs = CoefficientSet(
        drift_b=_zero4,
        diffusion_sigma=lambda t, x: np.ones(np.broadcast(t, x).shape),
        driver_f=lambda t, x, y, z: y + z + 0.0 * (t + x),
        terminal_phi=sigmoid,
        growth_Lambda=1.0, ellipticity_lambda=1.0, lipschitz_K=0.0,
        smoothness_flags={"b": "C2", "sigma": "C2", "f": "C2", "phi": "C2"},
        optional_derivatives=derivs, sigma_const=1.0, drift_affine=(0.0, 0.0),
        metadata={"driver_convention": "dY = -f dt + Z dW"},
    )
    return ModelInstance(coeffs, x0=float(x0), horizon_T=float(T), name="worked_example",
                         params={"T": float(T), "x0": float(x0)})


def builtin_ou(beta=1.0, T=1.0, x0=0.0, phi=None, driver=None):
    """Ornstein-Uhlenbeck forward process dX = -beta X dt + dW.

    ``phi`` defaults to the sigmoid and ``driver`` to zero.
    """
    phi = sigmoid if phi is None else phi
    f = _zero4 if driver is None else driver
    coeffs = CoefficientSet(
        drift_b=lambda t, x, y, z: -beta * x + 0.0 * (t + y + z),
        diffusion_sigma=lambda t, x: np.ones(np.broadcast(t, x).shape),
        driver_f=f, terminal_phi=phi, lipschitz_K=abs(beta),
        sigma_const=1.0, drift_affine=(0.0, -float(beta)),
        optional_derivatives={} if driver is not None else {"f_x": _zero4, "f_y": _zero4, "f_z": _zero4},
    )
    return ModelInstance(coeffs, x0=float(x0), horizon_T=float(T), name="ou",
                         params={"beta": float(beta)})


def builtin_regime_switching(k1=1.0, k2=-1.0, alpha=0.5, beta=1.0, h=None, phi=None,
                             T=1.0, x0=0.0):
    """Regime-switching model with a drift that jumps when Y crosses ``alpha``.

    The printed backward equation has ``+ (1 - h(X) Y) dt``; with the
    convention dY = -f dt + Z dW this is f = 1 - h(x) y after moving the
    integral to the right-hand side (Y_t = phi(X_T) + int_t^T (1 - h Y) ds).
    """
    h = (lambda x: np.zeros(np.shape(x))) if h is None else h
    phi = (lambda x: np.tanh(np.asarray(x, float))) if phi is None else phi

    def k(y):
        return np.where(np.asarray(y) <= alpha, k1, k2)

    def drift(t, x, y, z):
        return k(y) - beta * np.asarray(x, float) + 0.0 * (t + z)

    def driver(t, x, y, z):
        return 1.0 - h(x) * y + 0.0 * (t + z)

    same = k1 == k2
    coeffs = CoefficientSet(
        drift_b=drift,
        diffusion_sigma=lambda t, x: np.ones(np.broadcast(t, x).shape),
        driver_f=driver, terminal_phi=phi,
        growth_Lambda=max(1.0, float(np.max(np.abs(phi(np.linspace(-10, 10, 201)))))),
        lipschitz_K=abs(beta),
        smoothness_flags={"b": "C2" if same else "measurable", "sigma": "C2", "f": "lipschitz",
                          "phi": "lipschitz"},
        sigma_const=1.0, drift_affine=(float(k1), -float(beta)) if same else None,
        metadata={"driver_convention": "dY = -f dt + Z dW; converted from the +dt form",
                  "indicator": "k1 on y <= alpha"},
    )
    return ModelInstance(coeffs, x0=float(x0), horizon_T=float(T), name="regime_switching",
                         params={"k1": k1, "k2": k2, "alpha": alpha, "beta": beta})


def ramp_payoff(strike=0.0, width=1.0):
    def F(x):
        return np.clip((np.asarray(x, float) - strike) / width, 0.0, 1.0)
    return F


def builtin_pricing_model(lam=0.05, lam_hat=0.1, R=0.0, sigma=0.3, alpha_fn=None, gamma=1.0,
                          C_interval=(-math.inf, math.inf), payoff_F=None, T=1.0, x0=0.0):
    """Forward log-price with a dividend yield switching at ``R``.

    Returns ``(model_zero, model_F)``: both share the forward equation
    dX = -(lam 1_{x<R} + lam_hat 1_{x>=R} + sigma^2/2) dt + sigma dW and the
    indifference driver; the terminal values are 0 and F(x).  The printed
    backward equations read Y_s = xi - int_s^T f du - int_s^T Z dW, which in
    the dY = -f dt + Z dW convention is the driver -f(t, x, sigma * v_x).
    """
    from .pricing import ConstraintInterval, indifference_driver

    if not sigma > 0:
        raise ValueError("sigma must be positive")
    if not gamma > 0:
        raise ValueError("gamma must be positive")
    C = C_interval if isinstance(C_interval, ConstraintInterval) else ConstraintInterval(*C_interval)
    alpha_fn = (lambda t, x: np.zeros(np.broadcast(t, x).shape)) if alpha_fn is None else alpha_fn
    F = (lambda x: np.zeros(np.shape(x))) if payoff_F is None else payoff_F
    sig = float(sigma)

    def drift(t, x, y, z):
        x = np.asarray(x, float)
        return -(np.where(x < R, lam, lam_hat) + 0.5 * sig ** 2) + 0.0 * (t + y + z)

    def driver(t, x, y, g):
        return -indifference_driver(t, x, sig * np.asarray(g, float), gamma, alpha_fn, C)

    same = lam == lam_hat
    common = dict(
        drift_b=drift,
        diffusion_sigma=lambda t, x: np.full(np.broadcast(t, x).shape, sig),
        driver_f=driver, ellipticity_lambda=sig ** 2,
        smoothness_flags={"b": "C2" if same else "measurable", "sigma": "C2", "f": "C1",
                          "phi": "lipschitz"},
        sigma_const=sig,
        drift_affine=(-(lam + 0.5 * sig ** 2), 0.0) if same else None,
        metadata={"driver_convention": "dY = -f dt + Z dW; stored driver is -f(t, x, sigma g)",
                  "indicator": "lam_hat on x >= R"},
    )
    params = {"lam": lam, "lam_hat": lam_hat, "R": R, "sigma": sig, "gamma": gamma,
              "C": [C.lower, C.upper]}
    extras = {"gamma": float(gamma), "alpha_fn": alpha_fn, "C": C, "sigma": sig, "F": F}
    m0 = ModelInstance(CoefficientSet(terminal_phi=lambda x: np.zeros(np.shape(x)), **common),
                       x0=float(x0), horizon_T=float(T), name="pricing_zero", params=params,
                       extras=extras)
    mF = ModelInstance(CoefficientSet(terminal_phi=F, **common), x0=float(x0), horizon_T=float(T),
                       name="pricing_F", params=params, extras=extras)
    return m0, mF


# ---------------------------------------------------------------------------
# JSON model documents


def _term(spec):
    """Build a callable of one variable from a JSON term description."""
    kind = spec.get("type")
    if kind == "const":
        c = float(spec["value"])
        return lambda u: np.full(np.shape(u), c)
    if kind == "poly":
        coefs = [float(c) for c in spec["coefficients"]]  # lowest degree first
        return lambda u: np.polynomial.polynomial.polyval(np.asarray(u, float), coefs)
    if kind == "piecewise":
        breaks = np.asarray(spec["breaks"], float)
        pieces = [_term(p) for p in spec["pieces"]]
        if len(pieces) != len(breaks) + 1:
            raise ConfigInvalid("piecewise term needs len(breaks)+1 pieces")
        # right-closed pieces: piece i covers [breaks[i-1], breaks[i])
        def pw(u):
            u = np.asarray(u, float)
            idx = np.searchsorted(breaks, u, side="right")
            out = np.zeros(u.shape)
            for i, p in enumerate(pieces):
                m = idx == i
                if np.any(m):
                    out[m] = p(u[m])
            return out
        return pw
    if kind == "table":
        xs = np.asarray(spec["x"], float)
        ys = np.asarray(spec["y"], float)
        if np.any(np.diff(xs) <= 0):
            raise ConfigInvalid("table abscissae must increase")
        from scipy.interpolate import PchipInterpolator
        P = PchipInterpolator(xs, ys, extrapolate=False)
        return lambda u: P(np.clip(np.asarray(u, float), xs[0], xs[-1]))
    if kind == "sigmoid":
        return sigmoid
    if kind == "tanh":
        return lambda u: np.tanh(np.asarray(u, float))
    if kind == "ramp":
        return ramp_payoff(float(spec.get("strike", 0.0)), float(spec.get("width", 1.0)))
    raise ConfigInvalid(f"unknown term type {kind!r}")


_VARS = {"t": 0, "x": 1, "y": 2, "z": 3}


def _sum_of_terms(specs, arity):
    """Coefficient as a sum of single-variable terms, each with a variable and a scale."""
    if isinstance(specs, (int, float)):
        specs = [{"var": "x", "type": "const", "value": float(specs)}]
    if isinstance(specs, dict):
        specs = [specs]
    parts = []
    for s in specs:
        var = s.get("var", "x")
        if var not in _VARS or _VARS[var] >= arity:
            raise ConfigInvalid(f"variable {var!r} not allowed here")
        parts.append((_VARS[var], _term(s), float(s.get("scale", 1.0))))

    def fn(*args):
        shape = np.broadcast(*args).shape
        out = np.zeros(shape)
        for i, g, c in parts:
            out = out + c * np.broadcast_to(g(args[i]), shape)
        return out
    return fn


_BUILTINS = {
    "worked_example": builtin_worked_example,
    "ou": builtin_ou,
    "regime_switching": builtin_regime_switching,
}


def model_from_dict(doc):
    """Build a model from a parsed JSON document.

    Either ``{"builtin": name, "params": {...}}`` or
    ``{"inline": {"b": terms, "sigma": terms, "f": terms, "phi": terms},
    "x0": ..., "T": ...}``.  The schema is described in the README.
    """
    if not isinstance(doc, dict):
        raise ConfigInvalid("model spec must be an object")
    if "builtin" in doc:
        name = doc["builtin"]
        params = dict(doc.get("params", {}))
        if name == "pricing":
            payoff = params.pop("payoff", None)
            if payoff is not None:
                params["payoff_F"] = _term(payoff)
            if "alpha" in params:
                a = float(params.pop("alpha"))
                params["alpha_fn"] = lambda t, x: np.full(np.broadcast(t, x).shape, a)
            if "C" in params:
                lo, hi = params.pop("C")
                params["C_interval"] = (-math.inf if lo is None else lo, math.inf if hi is None else hi)
            try:
                return builtin_pricing_model(**params)
            except (TypeError, InvalidInterval) as exc:
                raise ConfigInvalid(str(exc)) from exc
        if name not in _BUILTINS:
            raise ConfigInvalid(f"unknown built-in model {name!r}")
        for key in ("phi", "h"):
            if key in params:
                params[key] = _term(params[key])
        try:
            return _BUILTINS[name](**params)
        except TypeError as exc:
            raise ConfigInvalid(str(exc)) from exc
    if "inline" in doc:
        spec = doc["inline"]
        try:
            b = _sum_of_terms(spec.get("b", 0.0), 4)
            sig = _sum_of_terms(spec.get("sigma", 1.0), 2)
            f = _sum_of_terms(spec.get("f", 0.0), 4)
            phi_terms = spec.get("phi", 0.0)
            phi2 = _sum_of_terms(phi_terms, 2)
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigInvalid(str(exc)) from exc
        coeffs = CoefficientSet(
            drift_b=b, diffusion_sigma=sig, driver_f=f,
            terminal_phi=lambda x: phi2(0.0, x),
            growth_Lambda=float(doc.get("growth_Lambda", 1.0)),
            ellipticity_lambda=float(doc.get("ellipticity_lambda", 1.0)),
            lipschitz_K=float(doc.get("lipschitz_K", 0.0)),
            smoothness_flags=doc.get("smoothness_flags",
                                     {"b": "measurable", "sigma": "lipschitz", "f": "lipschitz",
                                      "phi": "lipschitz"}),
            sigma_const=doc.get("sigma_const"),
        )
        return ModelInstance(coeffs, x0=float(doc.get("x0", 0.0)), horizon_T=float(doc.get("T", 1.0)),
                             name=doc.get("name", "inline"))
    raise ConfigInvalid("model spec needs 'builtin' or 'inline'")


def load_model(path):
    with open(path) as fh:
        return model_from_dict(json.load(fh))
