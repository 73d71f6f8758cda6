"""Numerical substrate: checked array helpers, splittable RNG, finite differences
and the ``MGT1`` binary tensor format.

Tensors are plain ``numpy.ndarray`` objects (row-major, float32 or float64).
The helpers here add the shape and finiteness checks that the hand-written
layers rely on.
"""

from __future__ import annotations

import io
import struct
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit

PRECISIONS = {"f32": np.float32, "f64": np.float64}
_TAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_TAG_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
MAGIC = b"MGT1"


class ShapeError(ValueError):
    pass


class NumericalError(FloatingPointError):
    pass


def as_tensor(x, dtype=np.float64) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(x, dtype=dtype))


def check_finite(x: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        bad = np.argwhere(~np.isfinite(x))[0]
        raise NumericalError(f"non-finite value in {what} at index {tuple(bad)}")
    return x


def _same_dtype(a: np.ndarray, b: np.ndarray, op: str) -> None:
    if a.dtype != b.dtype:
        raise TypeError(f"{op}: precision mismatch {a.dtype} vs {b.dtype}")


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    _same_dtype(a, b, "matmul")
    if a.ndim < 1 or b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return check_finite(a @ b, "matmul output")


def _broadcast_ok(a: np.ndarray, b: np.ndarray) -> bool:
    # trailing-dimension rule: the smaller operand must match the trailing dims
    small, big = (a, b) if a.ndim <= b.ndim else (b, a)
    return small.shape == big.shape[big.ndim - small.ndim:]


def add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    _same_dtype(a, b, "add")
    if not _broadcast_ok(a, b):
        raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}")
    return check_finite(a + b, "add output")


def mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    _same_dtype(a, b, "mul")
    if not _broadcast_ok(a, b):
        raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}")
    return check_finite(a * b, "mul output")


def sigmoid(x: np.ndarray) -> np.ndarray:
    return expit(x)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def transpose(x: np.ndarray) -> np.ndarray:
    if x.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {x.shape}")
    return np.ascontiguousarray(x.T)


def take_slice(x: np.ndarray, axis: int, start: int, stop: int) -> np.ndarray:
    if not 0 <= start <= stop <= x.shape[axis]:
        raise ShapeError(f"slice [{start}:{stop}] out of range for axis {axis} of {x.shape}")
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, stop)
    return x[tuple(idx)]


def reduce_mean(x: np.ndarray, axis=None, keepdims=False) -> np.ndarray:
    return np.mean(x, axis=axis, keepdims=keepdims)


def reduce_var(x: np.ndarray, axis=None, keepdims=False) -> np.ndarray:
    return np.var(x, axis=axis, keepdims=keepdims)


class Rng:
    """Counter-based, splittable random stream (Philox under the hood).

    ``split(i)`` derives an independent child stream from the seed and the
    path of split indices, so results never depend on the order in which
    sibling streams are consumed.
    """

    def __init__(self, seed: int, path: tuple[int, ...] = ()):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.path = tuple(int(p) for p in path)
        ss = np.random.SeedSequence(self.seed, spawn_key=self.path)
        self._gen = np.random.Generator(np.random.Philox(ss))

    def split(self, index: int) -> "Rng":
        return Rng(self.seed, self.path + (index,))

    def clone(self) -> "Rng":
        """Fresh copy positioned at the start of this stream."""
        return Rng(self.seed, self.path)

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def uniform(self, lo: float, hi: float, shape, dtype=np.float64) -> np.ndarray:
        return rng_uniform(self, lo, hi, shape, dtype)

    def normal(self, shape, dtype=np.float64) -> np.ndarray:
        return self._gen.standard_normal(shape).astype(dtype)

    def integers(self, lo: int, hi: int, shape=None) -> np.ndarray:
        return self._gen.integers(lo, hi, size=shape)

    def random(self, shape=None) -> np.ndarray:
        return self._gen.random(shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)


def rng_uniform(rng: Rng, lo: float, hi: float, shape, dtype=np.float64) -> np.ndarray:
    if not lo < hi:
        raise ValueError(f"rng_uniform needs lo < hi, got lo={lo}, hi={hi}")
    u = rng.generator.random(shape)
    # guard the half-open interval against rounding up to hi
    out = lo + (hi - lo) * u
    out = np.where(out >= hi, np.nextafter(hi, lo), out)
    return out.astype(dtype)


def finite_diff_grad(f: Callable[[np.ndarray], float], x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of a scalar function, one element at a time."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = np.array(x, dtype=np.float64, copy=True)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(x))
        flat[i] = orig - eps
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericalError(f"non-finite function value while perturbing element {i}")
        gflat[i] = (fp - fm) / (2 * eps)
    return grad


def rel_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    """max |a-b| / max(|a|, |b|, floor), elementwise max."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


def grad_rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Error of a gradient relative to the gradient's overall scale.

    Elementwise relative error is meaningless for entries that are zero up to
    rounding, so the denominator is floored at the largest magnitude present.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.size == 0:
        return 0.0
    scale = max(np.max(np.abs(a)), np.max(np.abs(n)), 1e-12)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-3 * scale)
    return float(np.max(np.abs(a - n) / denom))


# -- MGT1 binary tensor format --------------------------------------------------

def tensor_to_bytes(x: np.ndarray) -> bytes:
    x = np.asarray(x)
    if x.dtype not in _TAGS:
        raise TypeError(f"only float32/float64 tensors can be serialized, got {x.dtype}")
    tag = _TAGS[x.dtype]
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<BB", tag, x.ndim))
    buf.write(struct.pack(f"<{x.ndim}Q", *x.shape))
    buf.write(np.ascontiguousarray(x, dtype=_TAG_DTYPES[tag]).tobytes())
    return buf.getvalue()


def tensor_from_bytes(data: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one tensor starting at ``offset``; returns (tensor, next offset)."""
    if data[offset:offset + 4] != MAGIC:
        raise ValueError(f"bad tensor magic at offset {offset}")
    if len(data) < offset + 6:
        raise ValueError(f"truncated tensor header at offset {offset}")
    tag, rank = struct.unpack_from("<BB", data, offset + 4)
    if tag not in _TAG_DTYPES:
        raise ValueError(f"unknown precision tag {tag} at offset {offset + 4}")
    pos = offset + 6
    if len(data) < pos + 8 * rank:
        raise ValueError(f"truncated tensor extents at offset {pos}")
    shape = struct.unpack_from(f"<{rank}Q", data, pos)
    pos += 8 * rank
    dt = _TAG_DTYPES[tag]
    nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
    if len(data) < pos + nbytes:
        raise ValueError(f"truncated tensor payload at offset {pos}")
    arr = np.frombuffer(data, dtype=dt, count=nbytes // dt.itemsize, offset=pos)
    arr = arr.astype(dt.newbyteorder("="), copy=True).reshape(shape)
    return arr, pos + nbytes


def save_tensor(path, x: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(tensor_to_bytes(x))


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    arr, end = tensor_from_bytes(data)
    if end != len(data):
        raise ValueError(f"trailing bytes after tensor at offset {end}")
    return arr


def save_tensors(path, tensors: Sequence[np.ndarray]) -> None:
    with open(path, "wb") as fh:
        for t in tensors:
            fh.write(tensor_to_bytes(t))


def load_tensors(path) -> list[np.ndarray]:
    with open(path, "rb") as fh:
        data = fh.read()
    out, pos = [], 0
    while pos < len(data):
        arr, pos = tensor_from_bytes(data, pos)
        out.append(arr)
    return out
