"""Dense arrays, deterministic random streams and the elementwise/reduction
primitives the rest of the package builds on.

Tensors are plain ``numpy.ndarray`` objects; the functions here add the shape
and domain checks the rest of the code relies on and never modify their
inputs.

The random stream is a splitmix64 counter generator.  Output ``k`` (1-based)
of a generator seeded with ``s`` is ``mix(s + k * 0x9E3779B97F4A7C15 mod 2**64)``
where ``mix`` is the splitmix64 finaliser.  Uniforms take the top 53 bits:
``u = (x >> 11) * 2**-53``.  Gaussians use Box-Muller on consecutive uniform
pairs ``(a, b)``::

    r = sqrt(-2 ln(1 - a)),  z0 = r cos(2 pi b),  z1 = r sin(2 pi b)

emitted in the order ``z0, z1, z0', z1', ...``.  Because the stream is a pure
function of the seed and counter it is reproducible on any platform.
"""

import os

import numpy as np

from .errors import DomainError, ShapeError

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1

#: Precision profile for training builds, chosen once per process from the
#: ``COPDFLOW_PRECISION`` environment variable ("32" or "64").  Gradient checks
#: always run in float64 regardless of this setting.
TRAIN_DTYPE = np.dtype(np.float64 if os.environ.get("COPDFLOW_PRECISION") == "64" else np.float32)


def _splitmix(z):
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


class Rng:
    """Seedable 64-bit random stream (splitmix64).

    Single-owner: do not share one instance between threads.
    """

    def __init__(self, seed=0):
        self.seed = int(seed) & _MASK64
        self._state = self.seed

    def __repr__(self):
        return f"Rng(seed={self.seed})"

    def next_u64(self, n):
        n = int(n)
        k = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            z = np.uint64(self._state) + k * _GOLDEN
            out = _splitmix(z)
        self._state = (self._state + n * 0x9E3779B97F4A7C15) & _MASK64
        return out

    def random(self, shape=()):
        """Uniform floats in [0, 1)."""
        shape = _as_shape(shape, allow_scalar=True)
        n = int(np.prod(shape, dtype=np.int64))
        u = (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        return u.reshape(shape)

    def uniform(self, low, high, shape=()):
        return low + (high - low) * self.random(shape)

    def normal(self, shape=(), mean=0.0, stddev=1.0):
        shape = _as_shape(shape, allow_scalar=True)
        n = int(np.prod(shape, dtype=np.int64))
        pairs = (n + 1) // 2
        u = self.random(2 * pairs).reshape(pairs, 2)
        r = np.sqrt(-2.0 * np.log1p(-u[:, 0]))
        theta = 2.0 * np.pi * u[:, 1]
        z = np.empty((pairs, 2))
        z[:, 0] = r * np.cos(theta)
        z[:, 1] = r * np.sin(theta)
        return (mean + stddev * z.reshape(-1)[:n]).reshape(shape)

    def integers(self, high, shape=()):
        """Integers in [0, high) by multiply-shift on the top 53 bits."""
        if high <= 0:
            raise DomainError("high must be positive")
        return np.floor(self.random(shape) * high).astype(np.int64)

    def permutation(self, n):
        keys = self.next_u64(n)
        return np.argsort(keys, kind="stable")

    def spawn(self, *keys):
        """Child stream derived from this stream's seed and ``keys``.

        Does not advance the parent, so children are stable no matter how many
        draws the parent has made.
        """
        state = self.seed
        for key in keys:
            if isinstance(key, str):
                key = int.from_bytes(key.encode(), "little") & _MASK64
            with np.errstate(over="ignore"):
                state = int(_splitmix(np.uint64((state ^ int(key)) & _MASK64) + _GOLDEN))
        return Rng(state)


def _as_shape(shape, allow_scalar=False):
    if isinstance(shape, (int, np.integer)):
        shape = (int(shape),)
    shape = tuple(int(s) for s in shape)
    if not shape and not allow_scalar:
        raise ShapeError("shape must have at least one dimension")
    if any(s <= 0 for s in shape):
        raise ShapeError(f"invalid shape {shape}: every dimension must be positive")
    return shape


def randn(rng, shape, mean=0.0, stddev=1.0, dtype=np.float64):
    if stddev < 0:
        raise DomainError("stddev must be non-negative")
    shape = _as_shape(shape)
    return rng.normal(shape, mean, stddev).astype(dtype, copy=False)


def zeros(shape, dtype=np.float64):
    return np.zeros(_as_shape(shape), dtype=dtype)


def flat_index(shape, index):
    """Row-major flat offset of ``index`` within an array of ``shape``."""
    if len(index) != len(shape):
        raise ShapeError("index rank does not match shape rank")
    offset = 0
    for dim, i in zip(shape, index):
        if not 0 <= i < dim:
            raise ShapeError(f"index {tuple(index)} out of bounds for {tuple(shape)}")
        offset = offset * dim + i
    return offset


def strides(shape):
    out, acc = [], 1
    for dim in reversed(shape):
        out.append(acc)
        acc *= dim
    return tuple(reversed(out))


def matmul(a, b):
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    return a @ b


def reduce(t, kind, axis=None):
    t = np.asarray(t)
    if axis is not None and not -t.ndim <= axis < t.ndim:
        raise ShapeError(f"axis {axis} out of range for rank {t.ndim}")
    if kind == "sum":
        return np.sum(t, axis=axis)
    if kind == "mean":
        return np.mean(t, axis=axis)
    if kind == "max":
        return np.max(t, axis=axis)
    if kind == "argmax":
        # numpy returns the first occurrence, i.e. lowest index on ties
        return np.argmax(t, axis=axis)
    raise ValueError(f"unknown reduction {kind!r}")


def _zip(op, a, b):
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim and b.ndim and a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")
    return op(a, b)


def add(a, b):
    return _zip(np.add, a, b)


def sub(a, b):
    return _zip(np.subtract, a, b)


def mul(a, b):
    return _zip(np.multiply, a, b)


def scale(t, factor):
    return np.asarray(t) * factor


def clamp(t, lo, hi):
    return np.clip(t, lo, hi)


def exp(t):
    return np.exp(t)


def log(t):
    t = np.asarray(t)
    if np.any(t <= 0):
        raise DomainError("log of non-positive value")
    return np.log(t)


def tanh(t):
    return np.tanh(t)


def check_finite(t, what="tensor"):
    if not np.all(np.isfinite(t)):
        raise DomainError(f"{what} contains NaN or Inf")
    return t
