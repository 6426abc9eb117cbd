"""Estimators with the scikit-learn fit/predict interface.

``GaussianKDE`` is a binned Gaussian kernel density estimator (linear binning
on 2^14 nodes centred on the sample midrange, direct convolution) with a
bootstrap standard error.  Positions are measured from the centre node so
that mirrored samples give a mirrored estimate.
``BinnedRegressor`` is the equal-count piecewise regression used for
conditional expectations.
"""

import numpy as np
from sklearn.base import BaseEstimator, DensityMixin, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from .exceptions import DegenerateSamples, TooFewSamples

N_BINS_KDE = 2 ** 14


def silverman_bandwidth(x):
    """0.9 min(sd, IQR / 1.34) n^{-1/5}."""
    x = np.asarray(x, float)
    sd = x.std(ddof=1)
    q75, q25 = np.percentile(x, [75, 25])
    spread = min(sd, (q75 - q25) / 1.34) if q75 > q25 else sd
    return 0.9 * spread * len(x) ** (-0.2)


def scott_bandwidth(x):
    x = np.asarray(x, float)
    return 1.06 * x.std(ddof=1) * len(x) ** (-0.2)


_RULES = {"silverman": silverman_bandwidth, "scott": scott_bandwidth}


def _positions(x, centre, step, n):
    return (np.asarray(x, float) - centre) / step + 0.5 * (n - 1)


def _linear_bin(x, centre, step, n):
    pos = _positions(x, centre, step, n)
    i = np.clip(np.floor(pos).astype(np.int64), 0, n - 2)
    frac = pos - i
    counts = np.bincount(i, weights=1.0 - frac, minlength=n)
    counts += np.bincount(i + 1, weights=frac, minlength=n)
    return counts


def _centred_convolve(a, k):
    # like mode="same" but always len(a), also when the kernel is the longer one
    off = (len(k) - 1) // 2
    return np.convolve(a, k)[off:off + len(a)]


class GaussianKDE(BaseEstimator, DensityMixin):
    """Binned Gaussian kernel density estimate.

    Parameters
    ----------
    bandwidth : {"silverman", "scott"} or float
        Bandwidth rule or fixed bandwidth.
    n_bins : int
        Number of linear-binning cells on [min - 3h, max + 3h].
    bootstrap : int
        Resamples used for the pointwise standard error (0 disables it).
    min_samples : int
        Fewer samples raise :class:`TooFewSamples`.
    random_state : int
        Seed of the bootstrap resampling.
    """

    def __init__(self, bandwidth="silverman", n_bins=N_BINS_KDE, bootstrap=20, min_samples=1000,
                 random_state=0):
        self.bandwidth = bandwidth
        self.n_bins = n_bins
        self.bootstrap = bootstrap
        self.min_samples = min_samples
        self.random_state = random_state

    def _kernel(self):
        half = int(np.ceil(6.0 * self.bandwidth_ / self.step_))
        u = np.arange(-half, half + 1) * self.step_ / self.bandwidth_
        return np.exp(-0.5 * u * u) / (np.sqrt(2.0 * np.pi) * self.bandwidth_)

    def _density(self, x):
        counts = _linear_bin(x, self.centre_, self.step_, self.n_bins)
        dens = _centred_convolve(counts, self._kernel()) / len(x)
        return np.maximum(dens, 0.0)

    def fit(self, X, y=None):
        x = np.asarray(X, float).ravel()
        if x.size < self.min_samples:
            raise TooFewSamples(f"{x.size} samples, at least {self.min_samples} required")
        if isinstance(self.bandwidth, str):
            h = _RULES[self.bandwidth](x)
        else:
            h = float(self.bandwidth)
        if np.ptp(x) == 0.0 or not np.isfinite(h) or h <= 0.0:
            raise DegenerateSamples("zero bandwidth: the samples are (numerically) constant")
        self.bandwidth_ = h
        self.n_samples_ = x.size
        lo, hi = x.min() - 3.0 * h, x.max() + 3.0 * h
        self.centre_ = 0.5 * (lo + hi)
        self.step_ = (hi - lo) / (self.n_bins - 1)
        self.grid_ = self.centre_ + (np.arange(self.n_bins) - 0.5 * (self.n_bins - 1)) * self.step_
        self.density_ = self._density(x)
        if self.bootstrap:
            rng = np.random.default_rng(self.random_state)
            reps = np.empty((self.bootstrap, self.n_bins))
            for b in range(self.bootstrap):
                reps[b] = self._density(x[rng.integers(0, x.size, x.size)])
            var = reps.var(axis=0, ddof=1)
            # pool the bootstrap variance over one bandwidth: the true variance
            # varies on that scale, and 20 replicates alone give a noisy estimate
            self.stderr_ = np.sqrt(_centred_convolve(var, self._kernel()) * self.step_)
        else:
            self.stderr_ = np.zeros(self.n_bins)
        return self

    def score_samples(self, X):
        """Density (not log-density) at the query points."""
        check_is_fitted(self, "density_")
        return self._interp(X, self.density_)

    def stderr(self, X):
        check_is_fitted(self, "stderr_")
        return self._interp(X, self.stderr_)

    def _interp(self, X, table):
        pos = _positions(X, self.centre_, self.step_, self.n_bins)
        inside = (pos >= 0.0) & (pos <= self.n_bins - 1)
        i = np.clip(np.floor(pos).astype(np.int64), 0, self.n_bins - 2)
        frac = np.clip(pos - i, 0.0, 1.0)
        return np.where(inside, (1.0 - frac) * table[i] + frac * table[i + 1], 0.0)

    def score(self, X, y=None):
        return float(np.sum(np.log(np.maximum(self.score_samples(X), 1e-300))))

    @property
    def support(self):
        return float(self.grid_[0]), float(self.grid_[-1])


class BinnedRegressor(BaseEstimator, RegressorMixin):
    """Equal-count piecewise regression of y on a scalar x.

    ``fitted_`` holds the in-sample piecewise-constant fit (each sample gets
    the mean of its bin).  ``predict`` interpolates linearly between the bin
    centroids and extrapolates with the end slopes.
    """

    def __init__(self, n_bins=50, min_per_bin=10):
        self.n_bins = n_bins
        self.min_per_bin = min_per_bin

    def fit(self, X, y):
        from .exceptions import DegenerateBins
        x = np.asarray(X, float).ravel()
        y = np.asarray(y, float).ravel()
        if x.size < self.n_bins * self.min_per_bin:
            raise DegenerateBins(f"{x.size} samples give fewer than {self.min_per_bin} "
                                 f"per bin for {self.n_bins} bins")
        self.fitted_ = np.empty_like(y)
        if np.ptp(x) == 0.0:
            self.fitted_[:] = y.mean()
            self.centers_ = np.array([x[0]])
            self.means_ = np.array([y.mean()])
            self.stderr_ = np.array([y.std() / np.sqrt(y.size)])
            return self
        order = np.argsort(x, kind="stable")
        chunks = np.array_split(order, self.n_bins)
        self.centers_ = np.array([x[c].mean() for c in chunks])
        self.means_ = np.array([y[c].mean() for c in chunks])
        self.stderr_ = np.array([y[c].std(ddof=1) / np.sqrt(len(c)) for c in chunks])
        for c, m in zip(chunks, self.means_):
            self.fitted_[c] = m
        return self

    def predict(self, X):
        check_is_fitted(self, "means_")
        x = np.asarray(X, float)
        c, m = self.centers_, self.means_
        if c.size == 1:
            return np.full(x.shape, m[0])
        out = np.interp(x, c, m)
        lo_slope = (m[1] - m[0]) / (c[1] - c[0])
        hi_slope = (m[-1] - m[-2]) / (c[-1] - c[-2])
        out = np.where(x < c[0], m[0] + lo_slope * (x - c[0]), out)
        return np.where(x > c[-1], m[-1] + hi_slope * (x - c[-1]), out)
