"""Counter-based random streams.

Every random number is a pure function of ``(key, counter)`` where the key
is derived from ``(global_seed, batch_id, ray_id)``. No generator state is
shared between rays, so the result of a render does not depend on how rays
are scheduled across workers.

The bit mixer is the SplitMix64 finalizer; a stream is
``mix(key + (counter + 1) * golden)``.
"""

from __future__ import annotations

import numpy as np
from numba import njit

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_BATCH_MUL = np.uint64(0xD1B54A32D192ED03)
_RAY_MUL = np.uint64(0x8CB92BA72F3D8DD7)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)
_S11 = np.uint64(11)
_INV53 = 1.0 / 9007199254740992.0
_MASK64 = (1 << 64) - 1


@njit(cache=True, nogil=True, inline="always")
def mix64(z):
    z = np.uint64(z)
    z = (z ^ (z >> _S30)) * _M1
    z = (z ^ (z >> _S27)) * _M2
    return z ^ (z >> _S31)


@njit(cache=True, nogil=True)
def stream_key(seed, batch, ray):
    k = mix64(np.uint64(seed) + _GOLDEN)
    k = mix64(k ^ (np.uint64(batch) * _BATCH_MUL))
    return mix64(k ^ (np.uint64(ray) * _RAY_MUL))


@njit(cache=True, nogil=True, inline="always")
def uniform(key, counter):
    """Uniform double in [0, 1) at position ``counter`` of stream ``key``."""
    x = mix64(np.uint64(key) + (np.uint64(counter) + np.uint64(1)) * _GOLDEN)
    return np.float64(x >> _S11) * _INV53


@njit(cache=True, nogil=True)
def _fill_uniform(key, start, out):
    for i in range(out.shape[0]):
        out[i] = uniform(key, start + np.uint64(i))


def _u64(x: int) -> np.uint64:
    return np.uint64(int(x) & _MASK64)


class RngStream:
    """Stream keyed by ``(global_seed, batch_id, ray_id)``.

    >>> a = RngStream(7, 0, 3); b = RngStream(7, 0, 3)
    >>> a.uniform() == b.uniform()
    True
    """

    def __init__(self, global_seed: int, batch_id: int = 0, ray_id: int = 0, counter: int = 0):
        self.global_seed = int(global_seed)
        self.batch_id = int(batch_id)
        self.ray_id = int(ray_id)
        self.key = np.uint64(stream_key(_u64(global_seed), _u64(batch_id), _u64(ray_id)))
        self.counter = int(counter)

    def uniform(self) -> float:
        u = uniform(self.key, np.uint64(self.counter))
        self.counter += 1
        return float(u)

    def uniforms(self, n: int) -> np.ndarray:
        out = np.empty(int(n))
        _fill_uniform(self.key, np.uint64(self.counter), out)
        self.counter += int(n)
        return out

    def __repr__(self) -> str:
        return (f"RngStream(seed={self.global_seed}, batch={self.batch_id}, "
                f"ray={self.ray_id}, counter={self.counter})")
