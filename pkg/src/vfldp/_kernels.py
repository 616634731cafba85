"""Hot numeric kernels with a numba path and a pure-numpy fallback.

The backend is chosen once at import time. Set ``VFLDP_NO_NUMBA=1`` to force
the numpy path (numba is also skipped when it cannot be imported). Both
implementations are always importable under explicit names so the benchmark
and the cross-backend tests can call them side by side.
"""
import math
import os

import numpy as np

GOLDEN_GAMMA = 0x9E3779B97F4A7C15
MIX_MUL_1 = 0xBF58476D1CE4E5B9
MIX_MUL_2 = 0x94D049BB133111EB
MASK64 = 0xFFFFFFFFFFFFFFFF
TWO_POW_M53 = 1.0 / 9007199254740992.0
TWO_PI = 2.0 * math.pi


def _want_numba():
    flag = os.environ.get("VFLDP_NO_NUMBA", "").strip().lower()
    return flag not in ("1", "true", "yes", "on")


try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and _want_numba()
BACKEND = "numba" if USE_NUMBA else "numpy"


# --------------------------------------------------------------------------
# counter-based gaussian stream (SplitMix64 output function + Box-Muller)
# --------------------------------------------------------------------------

def gaussian_fill_numpy(key, n):
    if n <= 0:
        return np.zeros(0, dtype=np.float64)
    n_pairs = (n + 1) // 2
    idx = np.arange(1, 2 * n_pairs + 1, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = np.uint64(key) + idx * np.uint64(GOLDEN_GAMMA)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(MIX_MUL_1)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(MIX_MUL_2)
        z = z ^ (z >> np.uint64(31))
    u = ((z >> np.uint64(11)).astype(np.float64) + 0.5) * TWO_POW_M53
    u1 = u[0::2]
    u2 = u[1::2]
    r = np.sqrt(-2.0 * np.log(u1))
    theta = TWO_PI * u2
    out = np.empty(2 * n_pairs, dtype=np.float64)
    out[0::2] = r * np.cos(theta)
    out[1::2] = r * np.sin(theta)
    return out[:n]


def _gaussian_fill_py(key, n):
    n_pairs = (n + 1) // 2
    out = np.empty(2 * n_pairs, dtype=np.float64)
    k = np.uint64(key)
    gamma = np.uint64(GOLDEN_GAMMA)
    m1 = np.uint64(MIX_MUL_1)
    m2 = np.uint64(MIX_MUL_2)
    s30 = np.uint64(30)
    s27 = np.uint64(27)
    s31 = np.uint64(31)
    s11 = np.uint64(11)
    for j in range(n_pairs):
        c1 = np.uint64(2 * j + 1)
        c2 = np.uint64(2 * j + 2)
        z = k + c1 * gamma
        z = (z ^ (z >> s30)) * m1
        z = (z ^ (z >> s27)) * m2
        z = z ^ (z >> s31)
        w = k + c2 * gamma
        w = (w ^ (w >> s30)) * m1
        w = (w ^ (w >> s27)) * m2
        w = w ^ (w >> s31)
        u1 = (np.float64(z >> s11) + 0.5) * TWO_POW_M53
        u2 = (np.float64(w >> s11) + 0.5) * TWO_POW_M53
        r = math.sqrt(-2.0 * math.log(u1))
        theta = TWO_PI * u2
        out[2 * j] = r * math.cos(theta)
        out[2 * j + 1] = r * math.sin(theta)
    return out[:n]


def _relu_backward_py(grad, z):
    out = np.empty_like(grad)
    rows, cols = grad.shape
    for i in range(rows):
        for j in range(cols):
            out[i, j] = grad[i, j] if z[i, j] > 0.0 else 0.0
    return out


def relu_backward_numpy(grad, z):
    return np.where(z > 0.0, grad, 0.0)


def _sq_norm_py(v):
    acc = 0.0
    for i in range(v.shape[0]):
        acc += v[i] * v[i]
    return acc


def sq_norm_numpy(v):
    return float(np.dot(v, v))


if HAVE_NUMBA:
    gaussian_fill_numba = njit(cache=True)(_gaussian_fill_py)
    relu_backward_numba = njit(cache=True)(_relu_backward_py)
    sq_norm_numba = njit(cache=True)(_sq_norm_py)
else:  # pragma: no cover
    gaussian_fill_numba = gaussian_fill_numpy
    relu_backward_numba = relu_backward_numpy
    sq_norm_numba = sq_norm_numpy


def gaussian_fill(key, n):
    """Standard normal draws ``0..n-1`` of the stream identified by ``key``."""
    key = int(key) & MASK64
    n = int(n)
    if n <= 0:
        return np.zeros(0, dtype=np.float64)
    if USE_NUMBA:
        return gaussian_fill_numba(np.uint64(key), n)
    return gaussian_fill_numpy(key, n)


def relu_backward(grad, z):
    if USE_NUMBA:
        return relu_backward_numba(np.ascontiguousarray(grad), np.ascontiguousarray(z))
    return relu_backward_numpy(grad, z)


def sq_norm(v):
    v = np.ascontiguousarray(v, dtype=np.float64).ravel()
    if USE_NUMBA:
        return float(sq_norm_numba(v))
    return sq_norm_numpy(v)
