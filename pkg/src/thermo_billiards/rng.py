"""Counter-based random streams.

Every trajectory owns a stream keyed by ``(seed, stream_id)``.  The k-th
draw of a stream is a pure function of ``(seed, stream_id, k)``: a
Philox4x64-10 block evaluated at counter ``k // 4 + 1``.  The raw 64-bit
words coincide with ``numpy.random.Philox(key=[seed, stream_id])``, so
Python code and compiled kernels see the same sequence and results do not
depend on how work is chunked or scheduled.

Uniforms are the 53 high bits of a word shifted to the bin midpoint, so
they lie strictly inside (0, 1) and can be fed to an inverse CDF.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np
from llvmlite import binding as _llvm
from numba import types as _nt
from numba.extending import get_cython_function_address

from .errors import InvalidState

_MASK64 = (1 << 64) - 1
_M32 = np.uint64(0xFFFFFFFF)
_S32 = np.uint64(32)
_S11 = np.uint64(11)
_ONE = np.uint64(1)
_PHILOX_M0 = np.uint64(0xD2E7470EE14C6C93)
_PHILOX_M1 = np.uint64(0xCA5A826395121157)
_PHILOX_W0 = np.uint64(0x9E3779B97F4A7C15)
_PHILOX_W1 = np.uint64(0xBB67AE8584CAA73B)
_INV53 = 1.0 / 9007199254740992.0

# scipy's inverse normal CDF, bound by symbol name so compiled kernels can be
# cached on disk and relinked in a fresh process.
_llvm.add_symbol("thermo_billiards_ndtri",
                 get_cython_function_address("scipy.special.cython_special", "ndtri"))
ndtri = _nt.ExternalFunction("thermo_billiards_ndtri", _nt.float64(_nt.float64))


@numba.njit(cache=True, inline="always")
def _mulhilo(a, b):
    a_lo = a & _M32
    a_hi = a >> _S32
    b_lo = b & _M32
    b_hi = b >> _S32
    p0 = a_lo * b_lo
    p1 = a_lo * b_hi
    p2 = a_hi * b_lo
    p3 = a_hi * b_hi
    carry = ((p0 >> _S32) + (p1 & _M32) + (p2 & _M32)) >> _S32
    hi = p3 + (p1 >> _S32) + (p2 >> _S32) + carry
    return hi, a * b


@numba.njit(cache=True, nogil=True)
def philox4x64(c0, c1, c2, c3, k0, k1):
    """Philox4x64-10 bijection of a 256-bit counter under a 128-bit key."""
    for r in range(10):
        if r > 0:
            k0 = k0 + _PHILOX_W0
            k1 = k1 + _PHILOX_W1
        hi0, lo0 = _mulhilo(_PHILOX_M0, c0)
        hi1, lo1 = _mulhilo(_PHILOX_M1, c2)
        c0, c1, c2, c3 = hi1 ^ c1 ^ k0, lo1, hi0 ^ c3 ^ k1, lo0
    return c0, c1, c2, c3


@numba.njit(cache=True, nogil=True)
def raw_at(k0, k1, index):
    """Raw 64-bit word number ``index`` of stream ``(k0, k1)``."""
    block = index // np.uint64(4) + _ONE
    w = philox4x64(block, np.uint64(0), np.uint64(0), np.uint64(0), k0, k1)
    j = index % np.uint64(4)
    if j == 0:
        return w[0]
    if j == 1:
        return w[1]
    if j == 2:
        return w[2]
    return w[3]


@numba.njit(cache=True, nogil=True)
def uniform_at(k0, k1, index):
    return (float(raw_at(k0, k1, np.uint64(index)) >> _S11) + 0.5) * _INV53


@numba.njit(cache=True, nogil=True)
def normal_at(k0, k1, index):
    return ndtri(uniform_at(k0, k1, index))


@numba.njit(cache=True, nogil=True)
def _fill_uniforms(k0, k1, start, out):
    for i in range(out.size):
        out[i] = uniform_at(k0, k1, np.uint64(start + i))


@numba.njit(cache=True, nogil=True)
def _fill_raw(k0, k1, start, out):
    for i in range(out.size):
        out[i] = raw_at(k0, k1, np.uint64(start + i))


def _u64(value: int, name: str) -> np.uint64:
    value = int(value)
    if not 0 <= value <= _MASK64:
        raise InvalidState(f"{name} must be a 64-bit unsigned integer, got {value}")
    return np.uint64(value)


@dataclass
class RngStream:
    """A reproducible random stream.

    ``counter`` is the number of draws consumed so far.  Operations that take
    a stream advance it in place, so threading one stream through successive
    calls gives the same draws as a single longer call.
    """

    seed: int
    stream_id: int = 0
    counter: int = 0

    def __post_init__(self):
        _u64(self.seed, "seed")
        _u64(self.stream_id, "stream_id")

    @property
    def key(self) -> tuple[np.uint64, np.uint64]:
        return np.uint64(self.seed), np.uint64(self.stream_id)

    def raw(self, n: int) -> np.ndarray:
        out = np.empty(n, dtype=np.uint64)
        _fill_raw(*self.key, self.counter, out)
        self.counter += n
        return out

    def uniforms(self, n: int) -> np.ndarray:
        out = np.empty(n)
        _fill_uniforms(*self.key, self.counter, out)
        self.counter += n
        return out

    def uniform(self) -> float:
        return float(self.uniforms(1)[0])

    def normals(self, n: int) -> np.ndarray:
        """Standard normals by inversion, one draw each."""
        from scipy.special import ndtri as _ndtri

        return _ndtri(self.uniforms(n))

    def substream(self, stream_id: int) -> "RngStream":
        """A fresh stream sharing this seed."""
        return RngStream(self.seed, stream_id)


def stream_block(purpose: int, index_bits: int = 40) -> int:
    """First stream id of a disjoint id range reserved for ``purpose``."""
    return int(purpose) << index_bits
