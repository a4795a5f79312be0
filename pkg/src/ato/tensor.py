"""Dense float64 arithmetic and counter-based random streams.

Tensors are plain ``numpy.ndarray`` objects of dtype float64; this module adds
the checked constructor used at module boundaries, the matrix product and
reductions with explicit error behaviour, and :class:`Rng`.
"""
import json

import numpy as np

# Stream ids for independent consumers; changing one never perturbs another.
STREAM_INIT = 0
STREAM_SHUFFLE = 1
STREAM_GUMBEL = 2
STREAM_DATA = 3
STREAM_SPLIT = 4
STREAM_CONTROLLER = 5
STREAM_HARNESS = 6
STREAM_VERIFY = 7

_TWO53 = float(2 ** 53)


class ShapeError(ValueError):
    """Raised when array shapes do not conform."""


class DomainError(ValueError):
    """Raised for operations undefined on their input (e.g. empty reductions)."""


def as_tensor(x, shape=None):
    """Return ``x`` as a contiguous float64 array, rejecting NaN/Inf."""
    arr = np.ascontiguousarray(x, dtype=np.float64)
    if shape is not None and arr.shape != tuple(shape):
        raise ShapeError(f"expected shape {tuple(shape)}, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise DomainError("tensor contains NaN or Inf")
    return arr


def gemm(a, b):
    """Matrix product of a (m, k) and b (k, n) float64 arrays."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"gemm needs 2-d operands, got {a.ndim}-d and {b.ndim}-d")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions differ: {a.shape} x {b.shape}")
    return a @ b


def reduce(t, op, axes=None):
    """Sum, mean or max over ``axes`` (all axes when None)."""
    t = np.asarray(t, dtype=np.float64)
    if axes is not None:
        axes = (axes,) if np.isscalar(axes) else tuple(axes)
        for ax in axes:
            if not -t.ndim <= ax < t.ndim:
                raise DomainError(f"axis {ax} out of range for {t.ndim}-d tensor")
        count = int(np.prod([t.shape[ax] for ax in axes]))
    else:
        count = t.size
    if count == 0:
        raise DomainError("reduction over an empty set")
    if op == "sum":
        return np.sum(t, axis=axes)
    if op == "mean":
        return np.sum(t, axis=axes) / count
    if op == "max":
        return np.max(t, axis=axes)
    raise ValueError(f"unknown reduction {op!r}")


class Rng:
    """Philox counter-based generator keyed by (seed, stream id).

    Identical (seed, stream, draw sequence) gives identical output on every
    platform.  Instances are single-owner; give each consumer its own stream.
    """

    def __init__(self, seed, stream=0):
        self.seed = int(seed)
        self.stream = int(stream)
        key = np.array([self.seed & 0xFFFFFFFFFFFFFFFF, self.stream], dtype=np.uint64)
        self._bitgen = np.random.Philox(key=key)
        self.gen = np.random.Generator(self._bitgen)

    def uniform(self, shape=()):
        """Uniform draws on the open interval (0, 1): (k + 0.5) / 2**53."""
        n = int(np.prod(shape)) if shape != () else 1
        raw = self._bitgen.random_raw(n) >> np.uint64(11)
        u = (raw.astype(np.float64) + 0.5) / _TWO53
        return u.reshape(shape) if shape != () else float(u[0])

    def normal(self, shape, std=1.0):
        return self.gen.standard_normal(shape) * std

    def permutation(self, n):
        return self.gen.permutation(n)

    def integers(self, low, high, size=None):
        return self.gen.integers(low, high, size=size)

    def spawn(self, stream):
        """A fresh generator on another stream with the same seed."""
        return Rng(self.seed, stream)

    def get_state(self):
        return json.dumps(self._bitgen.state, sort_keys=True, default=_jsonable)

    def set_state(self, text):
        state = json.loads(text)
        inner = state["state"]
        inner["counter"] = np.array(inner["counter"], dtype=np.uint64)
        inner["key"] = np.array(inner["key"], dtype=np.uint64)
        state["buffer"] = np.array(state["buffer"], dtype=np.uint64)
        self._bitgen.state = state


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return [int(v) for v in obj]
    return int(obj)


def sample_gumbel(rng, shape):
    """Standard Gumbel(0, 1) draws, -ln(-ln(u)) with u on the open unit interval."""
    u = rng.uniform(shape)
    return -np.log(-np.log(u))
