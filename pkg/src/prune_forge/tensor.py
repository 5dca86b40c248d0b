"""Dense tensor helpers and a portable seeded random stream.

Tensors are plain row-major :class:`numpy.ndarray` objects of dtype float32
or float64.  The helpers here add the shape checks and the error types the
rest of the package relies on.
"""
from __future__ import annotations

import numpy as np

from .errors import DimensionError, ParameterError

F32 = np.dtype(np.float32)
F64 = np.dtype(np.float64)

_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB
_MASK64 = (1 << 64) - 1


def splitmix64_scalar(state):
    """One SplitMix64 step on Python ints. Returns ``(new_state, output)``."""
    state = (state + _GAMMA) & _MASK64
    z = state
    z = ((z ^ (z >> 30)) * _MIX1) & _MASK64
    z = ((z ^ (z >> 27)) * _MIX2) & _MASK64
    return state, z ^ (z >> 31)


def _shape(shape):
    if isinstance(shape, (int, np.integer)):
        return (int(shape),)
    return tuple(int(d) for d in shape)


class SeededRng:
    """SplitMix64 generator (Steele, Lea & Flood constants).

    The whole generator state is one unsigned 64-bit integer, so a stream can
    be checkpointed and resumed exactly.  Block draws are vectorised: output
    ``k`` of a block only depends on ``state + k * gamma``.
    """

    def __init__(self, seed=0):
        self.state = int(seed) & _MASK64

    def next_u64(self):
        self.state, out = splitmix64_scalar(self.state)
        return out

    def u64(self, n):
        n = int(n)
        k = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            z = np.uint64(self.state) + k * np.uint64(_GAMMA)
            z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
            z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
        z ^= z >> np.uint64(31)
        self.state = (self.state + n * _GAMMA) & _MASK64
        return z

    def random(self, shape, dtype=F64):
        """Uniform draws on [0, 1) with 53 bits of resolution."""
        shape = _shape(shape)
        n = int(np.prod(shape, dtype=np.int64))
        u = (self.u64(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        return u.reshape(shape).astype(dtype, copy=False)

    def uniform(self, shape, low, high, dtype=F64):
        u = self.random(shape)
        return (low + (high - low) * u).astype(dtype, copy=False)

    def normal(self, shape, dtype=F64):
        """Standard normal draws via Box-Muller."""
        shape = _shape(shape)
        n = int(np.prod(shape, dtype=np.int64))
        m = (n + 1) // 2
        u1 = 1.0 - self.random((m,))  # (0, 1]
        u2 = self.random((m,))
        rad = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([rad * np.cos(2 * np.pi * u2), rad * np.sin(2 * np.pi * u2)])
        return z[:n].reshape(shape).astype(dtype, copy=False)

    def integers(self, high, size):
        """Integers on [0, high). Modulo bias is below 2**-40 for high < 2**24."""
        return (self.u64(size) % np.uint64(high)).astype(np.int64)

    def permutation(self, n):
        keys = self.u64(n)
        return np.argsort(keys, kind="stable")

    def spawn(self):
        """Independent child stream seeded from this one."""
        return SeededRng(self.next_u64())


def as_tensor(data, dtype=F64):
    return np.ascontiguousarray(np.asarray(data, dtype=dtype))


def matmul(a, b):
    """2-D matrix product with shape and dtype checking."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    if a.dtype != b.dtype:
        raise DimensionError(f"matmul: dtype mismatch {a.dtype} vs {b.dtype}")
    return a @ b


def uniform_init(shape, r, rng, dtype=F32):
    """I.i.d. uniform entries on [-r, r]."""
    if not r > 0:
        raise ParameterError(f"uniform_init: scale must be positive, got {r}")
    return rng.uniform(tuple(shape), -r, r, dtype=dtype)


def sigmoid(x):
    # tanh form is overflow-free and exact at 0
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def relu(x):
    return np.maximum(x, 0)


_UNARY = {"tanh": np.tanh, "sigmoid": sigmoid, "relu": relu}
_BINARY = {"add": np.add, "sub": np.subtract, "mul": np.multiply}


def elementwise(op, a, b=None):
    a = np.asarray(a)
    if op in _UNARY:
        if b is not None:
            raise ParameterError(f"{op} is unary")
        return _UNARY[op](a)
    if op in _BINARY:
        if b is None:
            raise ParameterError(f"{op} needs two operands")
        b = np.asarray(b)
        if a.shape != b.shape:
            raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")
        return _BINARY[op](a, b)
    raise ParameterError(f"unknown elementwise op {op!r}")
