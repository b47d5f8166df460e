"""Counter-based random numbers for reproducible parallel Monte Carlo.

Every variate is a pure function of ``(key, counter)``, so a path's noise
depends only on the global seed, the stream it belongs to and its index.
Paths can be simulated in any order, on any number of threads, and the
results stay bitwise identical.

Key derivation::

    stream_key = mix64(mix64(seed) ^ (stream + 1) * GOLDEN)
    path_key   = mix64(stream_key ^ (index + 1) * GOLDEN)
    uniform    = top 53 bits of mix64(path_key ^ mix64(counter * GOLDEN))

``mix64`` is the SplitMix64 finalizer.  Gaussians use Box-Muller on two
consecutive counters, and each call yields a pair.
"""

import hashlib
import math

import numpy as np
from numba import njit

GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)
_S11 = np.uint64(11)
_INV53 = 1.0 / 9007199254740992.0
TWO_PI = 2.0 * math.pi

MASK64 = (1 << 64) - 1


@njit(cache=True)
def mix64(z):
    z = (z ^ (z >> _S30)) * _M1
    z = (z ^ (z >> _S27)) * _M2
    return z ^ (z >> _S31)


@njit(cache=True)
def uniform(key, counter):
    """Uniform on (0, 1]; never returns 0 so it is safe inside ``log``."""
    z = mix64(key ^ mix64(np.uint64(counter) * GOLDEN))
    return (float(z >> _S11) + 1.0) * _INV53


@njit(cache=True)
def gauss_pair(key, pair):
    u1 = uniform(key, 2 * pair)
    u2 = uniform(key, 2 * pair + 1)
    r = math.sqrt(-2.0 * math.log(u1))
    return r * math.cos(TWO_PI * u2), r * math.sin(TWO_PI * u2)


@njit(cache=True)
def fill_normals(key, first_pair, out):
    """Fill ``out`` with standard normals drawn from pairs starting at ``first_pair``."""
    m = out.shape[0]
    p = first_pair
    i = 0
    while i < m:
        z0, z1 = gauss_pair(key, p)
        out[i] = z0
        if i + 1 < m:
            out[i + 1] = z1
        i += 2
        p += 1


def _mix64_py(z):
    z &= MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def stream_key(seed, stream):
    """Key for a named stage or estimator stream derived from the global seed."""
    if isinstance(stream, str):
        stream = int.from_bytes(hashlib.sha256(stream.encode()).digest()[:8], "little")
    g = int(GOLDEN)
    return _mix64_py(_mix64_py(int(seed)) ^ (((int(stream) + 1) * g) & MASK64))


def path_keys(key, n, start=0):
    """Per-path keys for path indices ``start .. start + n - 1``."""
    idx = np.arange(start, start + n, dtype=np.uint64) + np.uint64(1)
    with np.errstate(over="ignore"):
        z = np.uint64(key) ^ (idx * GOLDEN)
        z = (z ^ (z >> _S30)) * _M1
        z = (z ^ (z >> _S27)) * _M2
        z = z ^ (z >> _S31)
    return z


def normals(key, n):
    """Vector of ``n`` standard normals from a single key (used for tests and sampling)."""
    out = np.empty(n)
    fill_normals(np.uint64(key), 0, out)
    return out
