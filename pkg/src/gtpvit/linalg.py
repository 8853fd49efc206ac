"""Dense matrix primitives and selection algorithms used across the engine.

All arithmetic is 64-bit floating point. Every tie in a selection or sort
is broken deterministically (lower original index wins) so results are
identical across runs and platforms.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ArgumentError, DegenerateInputError, ShapeError


class MacCounter:
    """Accumulates multiply-accumulate counts of instrumented dense ops."""

    def __init__(self):
        self.by_tag: dict[str, int] = {}

    def add(self, tag: str, macs: int) -> None:
        self.by_tag[tag] = self.by_tag.get(tag, 0) + int(macs)

    def total(self) -> int:
        return sum(self.by_tag.values())


@dataclass(frozen=True)
class Matrix:
    """Immutable row-major float64 matrix.

    Entries of any matrix produced by a public operation are finite; the
    constructor enforces this.
    """

    data: np.ndarray

    def __post_init__(self):
        a = np.ascontiguousarray(self.data, dtype=np.float64)
        if a.ndim != 2:
            raise ShapeError(f"matrix must be 2-D, got ndim={a.ndim}")
        if not np.isfinite(a).all():
            raise ArgumentError("matrix contains non-finite entries")
        object.__setattr__(self, "data", a)

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @classmethod
    def from_rows(cls, rows) -> "Matrix":
        return cls(np.asarray(rows, dtype=np.float64))

    @classmethod
    def zeros(cls, rows: int, cols: int) -> "Matrix":
        return cls(np.zeros((rows, cols), dtype=np.float64))

    @classmethod
    def identity(cls, n: int) -> "Matrix":
        return cls(np.eye(n, dtype=np.float64))


@dataclass(frozen=True)
class IndexSet:
    """Strictly increasing token positions."""

    indices: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))

    def __post_init__(self):
        a = np.asarray(self.indices, dtype=np.int64)
        if a.ndim != 1:
            raise ShapeError("index set must be 1-D")
        if a.size > 1 and not (np.diff(a) > 0).all():
            raise ArgumentError("indices must be strictly increasing")
        if a.size and a[0] < 0:
            raise ArgumentError("indices must be non-negative")
        object.__setattr__(self, "indices", a)

    @classmethod
    def of(cls, values) -> "IndexSet":
        return cls(np.sort(np.asarray(list(values), dtype=np.int64)))

    def __len__(self) -> int:
        return int(self.indices.size)

    def __iter__(self):
        return iter(self.indices.tolist())

    def __contains__(self, idx: int) -> bool:
        pos = np.searchsorted(self.indices, idx)
        return pos < self.indices.size and self.indices[pos] == idx

    def validate_bound(self, dim: int) -> None:
        if self.indices.size and self.indices[-1] >= dim:
            raise ArgumentError(f"index {int(self.indices[-1])} out of range for dimension {dim}")


def matmul(a: Matrix, b: Matrix, counter: MacCounter | None = None, tag: str = "matmul") -> Matrix:
    """Standard matrix product; optionally records rows*inner*cols MACs."""
    if a.cols != b.rows:
        raise ShapeError(f"matmul shapes incompatible: {a.rows}x{a.cols} @ {b.rows}x{b.cols}")
    if counter is not None:
        counter.add(tag, a.rows * a.cols * b.cols)
    return Matrix(a.data @ b.data)


def row_softmax(m: Matrix) -> Matrix:
    """Row-wise softmax with per-row max subtraction for stability."""
    if m.cols == 0:
        raise ShapeError("softmax over empty rows is undefined")
    return Matrix(_softmax_rows(m.data))


def _softmax_rows(a: np.ndarray) -> np.ndarray:
    shifted = a - a.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def kth_largest(values, k: int) -> float:
    """k-th largest value (duplicates counted), expected O(N) quickselect.

    Median-of-three pivoting with a three-way partition, so arrays full of
    duplicates still terminate in linear time.
    """
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 1:
        raise ShapeError("kth_largest expects a 1-D array")
    n = arr.size
    if not 1 <= k <= n:
        raise ArgumentError(f"k={k} out of range for array of length {n}")
    if not np.isfinite(arr).all():
        raise ArgumentError("kth_largest requires finite values")
    work = arr.copy()
    # k-th largest == element at ascending rank n-k.
    return float(_quickselect(work, n - k))


def _median_of_three(a: np.ndarray, lo: int, hi: int) -> float:
    mid = (lo + hi) // 2
    x, y, z = a[lo], a[mid], a[hi]
    if x > y:
        x, y = y, x
    if y > z:
        y = z
        if x > y:
            y = x
    return y


def _quickselect(a: np.ndarray, target: int) -> float:
    lo, hi = 0, a.size - 1
    while True:
        if lo == hi:
            return a[lo]
        pivot = _median_of_three(a, lo, hi)
        # Three-way partition of a[lo..hi] into < pivot | == pivot | > pivot.
        lt, i, gt = lo, lo, hi
        while i <= gt:
            v = a[i]
            if v < pivot:
                a[lt], a[i] = a[i], a[lt]
                lt += 1
                i += 1
            elif v > pivot:
                a[i], a[gt] = a[gt], a[i]
                gt -= 1
            else:
                i += 1
        if target < lt:
            hi = lt - 1
        elif target > gt:
            lo = gt + 1
        else:
            return pivot


def cosine_similarity(x, y) -> float:
    """Cosine of the angle between two vectors, clamped to [-1, 1]."""
    xv = np.asarray(x, dtype=np.float64).ravel()
    yv = np.asarray(y, dtype=np.float64).ravel()
    if xv.size != yv.size:
        raise ShapeError(f"vector lengths differ: {xv.size} vs {yv.size}")
    nx = float(np.linalg.norm(xv))
    ny = float(np.linalg.norm(yv))
    if nx == 0.0 or ny == 0.0:
        raise DegenerateInputError("cosine similarity undefined for zero-norm vector")
    return float(np.clip(float(xv @ yv) / (nx * ny), -1.0, 1.0))


def argsort_desc(values) -> np.ndarray:
    """Descending stable argsort; ties keep the lower original index first."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 1:
        raise ShapeError("argsort_desc expects a 1-D array")
    if not np.isfinite(arr).all():
        raise ArgumentError("argsort_desc requires finite values")
    return np.argsort(-arr, kind="stable").astype(np.int64)
