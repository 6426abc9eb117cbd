"""Monotone cubic (Fritsch-Carlson) interpolation on uniform grids.

The slope rule is the one used by ``scipy.interpolate.PchipInterpolator``;
it is reimplemented here so the evaluation kernel can run inside numba loops
over paths without a Python callback.
"""

import numpy as np
from numba import njit


def _edge_slope(h0, h1, d0, d1):
    # three-point, shape-preserving end slope
    s = ((2.0 * h0 + h1) * d0 - h0 * d1) / (h0 + h1)
    s = np.where(np.sign(s) != np.sign(d0), 0.0, s)
    flip = (np.sign(d0) != np.sign(d1)) & (np.abs(s) > np.abs(3.0 * d0))
    return np.where(flip, 3.0 * d0, s)


def pchip_slopes(values, dx):
    """Node slopes of the monotone cubic interpolant along the last axis.

    Parameters
    ----------
    values : ndarray, shape (..., n)
        Samples on a uniform grid with spacing ``dx``.
    dx : float

    Returns
    -------
    ndarray
        Slopes with the same shape as ``values``.
    """
    y = np.asarray(values, dtype=float)
    n = y.shape[-1]
    if n < 2:
        return np.zeros_like(y)
    delta = np.diff(y, axis=-1) / dx
    if n == 2:
        return np.repeat(delta, 2, axis=-1)
    d0, d1 = delta[..., :-1], delta[..., 1:]
    # equal spacing: weighted harmonic mean reduces to w1 = w2 = 3h
    with np.errstate(divide="ignore", invalid="ignore"):
        hm = 2.0 / (1.0 / d0 + 1.0 / d1)
    same = (np.sign(d0) == np.sign(d1)) & (d0 != 0.0) & (d1 != 0.0)
    out = np.empty_like(y)
    out[..., 1:-1] = np.where(same, hm, 0.0)
    out[..., 0] = _edge_slope(dx, dx, delta[..., 0], delta[..., 1])
    out[..., -1] = _edge_slope(dx, dx, delta[..., -1], delta[..., -2])
    return out


@njit(cache=True, nogil=True, inline="always")
def _hermite_row(row, slope, x_start, dx, x):
    n = row.shape[0]
    u = (x - x_start) / dx
    if u <= 0.0:
        return row[0]
    if u >= n - 1:
        return row[n - 1]
    j = int(u)
    if j > n - 2:
        j = n - 2
    s = u - j
    y0 = row[j]
    y1 = row[j + 1]
    m0 = slope[j] * dx
    m1 = slope[j + 1] * dx
    s2 = s * s
    s3 = s2 * s
    return ((2.0 * s3 - 3.0 * s2 + 1.0) * y0 + (s3 - 2.0 * s2 + s) * m0
            + (-2.0 * s3 + 3.0 * s2) * y1 + (s3 - s2) * m1)


@njit(cache=True, nogil=True)
def table_eval(vals, slopes, t_start, dt, x_start, dx, t, x):
    """Evaluate a space-time table at one point: cubic in x, linear in t.

    Points outside the table are clamped to its boundary.
    """
    m = vals.shape[0]
    if m == 1:
        return _hermite_row(vals[0], slopes[0], x_start, dx, x)
    u = (t - t_start) / dt
    if u <= 0.0:
        return _hermite_row(vals[0], slopes[0], x_start, dx, x)
    if u >= m - 1:
        return _hermite_row(vals[m - 1], slopes[m - 1], x_start, dx, x)
    i = int(u)
    if i > m - 2:
        i = m - 2
    w = u - i
    a = _hermite_row(vals[i], slopes[i], x_start, dx, x)
    if w == 0.0:
        return a
    b = _hermite_row(vals[i + 1], slopes[i + 1], x_start, dx, x)
    return (1.0 - w) * a + w * b


@njit(cache=True, nogil=True)
def table_eval_many(vals, slopes, t_start, dt, x_start, dx, t, x, out):
    for p in range(x.shape[0]):
        out[p] = table_eval(vals, slopes, t_start, dt, x_start, dx, t, x[p])
    return out


@njit(cache=True, nogil=True)
def table_eval_pairs(vals, slopes, t_start, dt, x_start, dx, t, x, out):
    for p in range(x.shape[0]):
        out[p] = table_eval(vals, slopes, t_start, dt, x_start, dx, t[p], x[p])
    return out
