"""Counter-based Gaussian noise (Philox4x32-10 + Box-Muller).

Every Brownian increment is a pure function of (seed, stream, path, step):
the counter is ``(step // 2, path_lo, path_hi, stream)`` and the key is the
64-bit seed split in two words.  One Philox call yields a pair of normals;
even steps take the cosine branch and odd steps the sine branch.  Because no
state is carried between draws, any partition of the paths across workers
reproduces the same sample bit for bit.
"""

import math

import numpy as np
from numba import njit

PHILOX_M0 = np.uint64(0xD2511F53)
PHILOX_M1 = np.uint64(0xCD9E8D57)
PHILOX_W0 = np.uint64(0x9E3779B9)
PHILOX_W1 = np.uint64(0xBB67AE85)
MASK32 = np.uint64(0xFFFFFFFF)
SHIFT32 = np.uint64(32)

TWO_PI = 2.0 * math.pi
INV_2_53 = 1.0 / 9007199254740992.0


@njit(cache=True, nogil=True)
def philox4x32(c0, c1, c2, c3, k0, k1):
    """Ten rounds of Philox4x32 on a 128-bit counter with a 64-bit key.

    All arguments are uint64 holding 32-bit words; returns four such words.
    """
    for _ in range(10):
        p0 = c0 * PHILOX_M0
        p1 = c2 * PHILOX_M1
        hi0 = p0 >> SHIFT32
        lo0 = p0 & MASK32
        hi1 = p1 >> SHIFT32
        lo1 = p1 & MASK32
        c0, c1, c2, c3 = (hi1 ^ c1 ^ k0) & MASK32, lo1, (hi0 ^ c3 ^ k1) & MASK32, lo0
        k0 = (k0 + PHILOX_W0) & MASK32
        k1 = (k1 + PHILOX_W1) & MASK32
    return c0, c1, c2, c3


@njit(cache=True, nogil=True)
def _uniform53(a, b):
    # 53-bit uniform in the open interval (0, 1)
    hi = np.float64(a >> np.uint64(5))
    lo = np.float64(b >> np.uint64(6))
    return (hi * 67108864.0 + lo + 0.5) * INV_2_53


@njit(cache=True, nogil=True)
def normal_at(k0, k1, stream, path, step):
    """Standard normal attached to (stream, path, step) under key (k0, k1)."""
    pair = np.uint64(step >> 1)
    pu = np.uint64(path)
    r0, r1, r2, r3 = philox4x32(pair & MASK32, pu & MASK32, pu >> SHIFT32,
                                np.uint64(stream) & MASK32, k0, k1)
    u1 = _uniform53(r0, r1)
    u2 = _uniform53(r2, r3)
    rad = math.sqrt(-2.0 * math.log(u1))
    if step & 1:
        return rad * math.sin(TWO_PI * u2)
    return rad * math.cos(TWO_PI * u2)


@njit(cache=True, nogil=True)
def normal_pair(k0, k1, stream, path, pair):
    """Both Box-Muller outputs (steps 2 pair and 2 pair + 1)."""
    pu = np.uint64(path)
    r0, r1, r2, r3 = philox4x32(np.uint64(pair) & MASK32, pu & MASK32, pu >> SHIFT32,
                                np.uint64(stream) & MASK32, k0, k1)
    rad = math.sqrt(-2.0 * math.log(_uniform53(r0, r1)))
    ang = TWO_PI * _uniform53(r2, r3)
    return rad * math.cos(ang), rad * math.sin(ang)


@njit(cache=True, nogil=True)
def _fill_normals(k0, k1, stream, path_start, step_start, out):
    n_paths, n_steps = out.shape
    for p in range(n_paths):
        pu = np.uint64(path_start + p)
        plo = pu & MASK32
        phi = pu >> SHIFT32
        s = 0
        while s < n_steps:
            step = step_start + s
            r0, r1, r2, r3 = philox4x32(np.uint64(step >> 1) & MASK32, plo, phi,
                                        np.uint64(stream) & MASK32, k0, k1)
            rad = math.sqrt(-2.0 * math.log(_uniform53(r0, r1)))
            ang = TWO_PI * _uniform53(r2, r3)
            if step & 1:
                out[p, s] = rad * math.sin(ang)
                s += 1
            else:
                out[p, s] = rad * math.cos(ang)
                if s + 1 < n_steps:
                    out[p, s + 1] = rad * math.sin(ang)
                s += 2
    return out


def seed_key(seed):
    """Split a nonnegative 64-bit seed into the two Philox key words."""
    seed = int(seed)
    if not 0 <= seed < 2 ** 64:
        raise ValueError("seed must be a 64-bit nonnegative integer")
    return np.uint64(seed & 0xFFFFFFFF), np.uint64(seed >> 32)


def standard_normals(seed, path_start, n_paths, step_start, n_steps, stream=0):
    """Array ``(n_paths, n_steps)`` of the standard normals of the given block."""
    k0, k1 = seed_key(seed)
    out = np.empty((int(n_paths), int(n_steps)))
    return _fill_normals(k0, k1, int(stream), int(path_start), int(step_start), out)


def brownian_increments(seed, path_start, n_paths, step_start, n_steps, dt, stream=0):
    """Brownian increments ``sqrt(dt) * N(0, 1)`` for a block of paths and steps."""
    return math.sqrt(dt) * standard_normals(seed, path_start, n_paths, step_start, n_steps,
                                            stream)


def philox_words(counter, key):
    """Pure-Python-facing wrapper returning the four output words as ints."""
    c = [np.uint64(int(w) & 0xFFFFFFFF) for w in counter]
    k = [np.uint64(int(w) & 0xFFFFFFFF) for w in key]
    return tuple(int(w) for w in philox4x32(c[0], c[1], c[2], c[3], k[0], k[1]))
