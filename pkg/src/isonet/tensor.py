"""Dense NCHW tensors on top of numpy, plus a counter-based RNG.

Tensors are plain ``numpy.ndarray`` objects. Network math runs in float32;
float64 is accepted everywhere so gradient checks can run at double
precision. Layout is row-major (n, c, h, w) throughout.
"""
from __future__ import annotations

import zlib
from typing import NamedTuple, Sequence

import numpy as np
from scipy.special import ndtr, ndtri

DTYPE = np.float32
_MAX_ELEMS = np.iinfo(np.int64).max


class Shape4(NamedTuple):
    n: int
    c: int
    h: int
    w: int

    @property
    def size(self) -> int:
        return self.n * self.c * self.h * self.w

    def validate(self) -> "Shape4":
        if any(int(v) != v or v < 1 for v in self):
            raise ValueError(f"all dimensions must be integers >= 1, got {tuple(self)}")
        size = 1
        for v in self:
            size *= int(v)
            if size > _MAX_ELEMS:
                raise OverflowError(f"element count of {tuple(self)} overflows int64")
        return self


def as_shape(shape: Sequence[int]) -> Shape4:
    if len(shape) != 4:
        raise ValueError(f"expected a rank-4 shape, got {tuple(shape)}")
    return Shape4(*(int(v) for v in shape)).validate()


class Rng:
    """Counter-based (Philox) random stream.

    ``Rng(seed).stream(i)`` derives an independent child stream, so weight
    init, shuffling and data synthesis never perturb each other. Samples are
    a pure function of (seed, stream path) and the position in the stream.
    """

    def __init__(self, seed: int, path: tuple[int, ...] = ()):
        self.seed = int(seed)
        self.path = tuple(int(p) for p in path)
        ss = np.random.SeedSequence(self.seed & 0xFFFFFFFFFFFFFFFF, spawn_key=self.path)
        self.generator = np.random.Generator(np.random.Philox(ss))

    def stream(self, key: int | str) -> "Rng":
        if isinstance(key, str):
            key = zlib.crc32(key.encode("utf-8"))
        return Rng(self.seed, self.path + (key,))

    def normal(self, size, stddev: float = 1.0) -> np.ndarray:
        return self.generator.standard_normal(size) * stddev

    def uniform(self, size=None, low: float = 0.0, high: float = 1.0):
        return self.generator.uniform(low, high, size)

    def integers(self, low: int, high: int, size=None):
        return self.generator.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, path={self.path})"


def zeros(shape: Sequence[int], dtype=DTYPE) -> np.ndarray:
    return np.zeros(as_shape(shape), dtype=dtype)


def rand_normal(shape: Sequence[int], rng: Rng, stddev: float, dtype=DTYPE) -> np.ndarray:
    if not stddev > 0:
        raise ValueError(f"stddev must be positive, got {stddev}")
    shape = as_shape(shape)
    return rng.normal(shape, stddev).astype(dtype)


def truncated_normal(shape: Sequence[int], rng: Rng, stddev: float, dtype=DTYPE) -> np.ndarray:
    """Normal samples truncated to two standard deviations.

    Drawn by inverse CDF from one uniform per element, so the stream is
    consumed exactly once per value.
    """
    if not stddev > 0:
        raise ValueError(f"stddev must be positive, got {stddev}")
    lo, hi = ndtr(-2.0), ndtr(2.0)
    u = rng.uniform(tuple(shape), lo, hi)
    return (ndtri(u) * stddev).astype(dtype)


def check_finite(x: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise FloatingPointError(f"{what} contains NaN or Inf")
    return x


def ewise(a: np.ndarray, b: np.ndarray, kind: str) -> np.ndarray:
    """Elementwise add/sub/mul; ``b`` may be a per-channel (1, c, 1, 1) tensor."""
    if a.shape != b.shape:
        if not (b.ndim == 4 and a.ndim == 4 and b.shape == (1, a.shape[1], 1, 1)):
            raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if kind == "add":
        return a + b
    if kind == "sub":
        return a - b
    if kind == "mul":
        return a * b
    raise ValueError(f"unknown elementwise kind {kind!r}")


def reduce(a: np.ndarray, axes: Sequence[int], kind: str, keepdims: bool = True) -> np.ndarray:
    """Sum/mean/max over ``axes``.

    Summation runs sequentially in row-major order over the reduced
    elements (via ``cumsum``'s left fold), which makes results independent
    of numpy's pairwise-summation blocking.
    """
    axes = tuple(sorted(ax % a.ndim for ax in axes))
    if kind == "max":
        return a.max(axis=axes, keepdims=keepdims)
    keep = [ax for ax in range(a.ndim) if ax not in axes]
    moved = np.transpose(a, keep + list(axes))
    flat = moved.reshape(moved.shape[: len(keep)] + (-1,))
    total = np.cumsum(flat, axis=-1)[..., -1]
    if kind == "mean":
        total = total / flat.shape[-1]
    elif kind != "sum":
        raise ValueError(f"unknown reduction kind {kind!r}")
    total = total.astype(a.dtype)
    if keepdims:
        out_shape = [1 if ax in axes else a.shape[ax] for ax in range(a.ndim)]
        total = total.reshape(out_shape)
    return total


def matmul2d(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"incompatible matmul shapes {a.shape} @ {b.shape}")
    return a @ b
