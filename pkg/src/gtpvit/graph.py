"""Sparse token graphs: spatial, semantic and mixed adjacency over the patch grid.

The graph is built once per image from the post-embedding features,
symmetrically normalized, and then only ever sliced as tokens are
eliminated layer by layer.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import ArgumentError, ConfigError, DegenerateInputError, PartitionError, ShapeError
from .linalg import IndexSet, kth_largest


class GraphKind(Enum):
    SPATIAL = "spatial"
    SEMANTIC = "semantic"
    MIXED = "mixed"
    NONE = "none"


@dataclass(frozen=True)
class RawAdjacency:
    """Unweighted directed adjacency as sorted (row, col) coordinate pairs."""

    n: int
    rows: np.ndarray
    cols: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rows, dtype=np.int64)
        c = np.asarray(self.cols, dtype=np.int64)
        if r.shape != c.shape or r.ndim != 1:
            raise ShapeError("rows/cols must be equal-length 1-D arrays")
        if r.size:
            if r.min() < 0 or c.min() < 0 or r.max() >= self.n or c.max() >= self.n:
                raise ArgumentError("adjacency index out of range")
            if (r == c).any():
                raise ArgumentError("self-loops are not allowed")
        order = np.lexsort((c, r))
        object.__setattr__(self, "rows", r[order])
        object.__setattr__(self, "cols", c[order])

    @property
    def nnz(self) -> int:
        return int(self.rows.size)

    def to_dense(self) -> np.ndarray:
        d = np.zeros((self.n, self.n), dtype=np.float64)
        d[self.rows, self.cols] = 1.0
        return d

    def row_degrees(self) -> np.ndarray:
        return np.bincount(self.rows, minlength=self.n).astype(np.int64)


def build_spatial(grid_h: int, grid_w: int) -> RawAdjacency:
    """8-neighbourhood adjacency on a grid_h x grid_w patch grid.

    Symmetric, no self-loops, identical for every image of the same size.
    """
    if grid_h < 1 or grid_w < 1:
        raise ArgumentError("grid dimensions must be >= 1")
    n = grid_h * grid_w
    rows, cols = [], []
    for r in range(grid_h):
        for c in range(grid_w):
            i = r * grid_w + c
            for dr in (-1, 0, 1):
                for dc in (-1, 0, 1):
                    if dr == 0 and dc == 0:
                        continue
                    rr, cc = r + dr, c + dc
                    if 0 <= rr < grid_h and 0 <= cc < grid_w:
                        rows.append(i)
                        cols.append(rr * grid_w + cc)
    return RawAdjacency(n, np.asarray(rows, dtype=np.int64), np.asarray(cols, dtype=np.int64))


def build_semantic(x0: np.ndarray, m: int) -> RawAdjacency:
    """Per-row top-m cosine-similarity adjacency over initial embeddings.

    Row i connects to every j != i whose similarity reaches the m-th
    largest similarity of row i; ties at the threshold are all kept, so a
    row has at least m edges. Not symmetrized.
    """
    x = np.asarray(x0, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError("token features must be 2-D (tokens x channels)")
    n = x.shape[0]
    if m < 1:
        raise ArgumentError("m must be >= 1")
    if m > n - 1:
        raise ArgumentError(f"m={m} needs at least {m + 1} tokens, got {n}")
    norms = np.linalg.norm(x, axis=1)
    if (norms == 0.0).any():
        raise DegenerateInputError("zero-norm token row in semantic graph build")
    unit = x / norms[:, None]
    sims = np.clip(unit @ unit.T, -1.0, 1.0)
    rows, cols = [], []
    others = np.arange(n)
    for i in range(n):
        off_diag = np.delete(sims[i], i)
        t_i = kth_largest(off_diag, m)
        mask = sims[i] >= t_i
        mask[i] = False
        js = others[mask]
        rows.extend([i] * js.size)
        cols.extend(js.tolist())
    return RawAdjacency(n, np.asarray(rows, dtype=np.int64), np.asarray(cols, dtype=np.int64))


def build_mixed(spatial: RawAdjacency, semantic: RawAdjacency) -> RawAdjacency:
    """Entrywise union of two adjacencies."""
    if spatial.n != semantic.n:
        raise ShapeError(f"adjacency sizes differ: {spatial.n} vs {semantic.n}")
    keys_a = spatial.rows * spatial.n + spatial.cols
    keys_b = semantic.rows * semantic.n + semantic.cols
    keys = np.union1d(keys_a, keys_b)
    return RawAdjacency(spatial.n, keys // spatial.n, keys % spatial.n)


@dataclass
class TokenGraph:
    """Symmetrically normalized token graph with a shrinking live set.

    Everything is immutable after construction except `live`, which the
    runtime narrows to the kept tokens after each propagation step.
    """

    n_tokens: int
    grid_h: int
    grid_w: int
    rows: np.ndarray
    cols: np.ndarray
    weights: np.ndarray
    live: IndexSet

    @property
    def nnz(self) -> int:
        return int(self.rows.size)

    def to_dense(self) -> np.ndarray:
        d = np.zeros((self.n_tokens, self.n_tokens), dtype=np.float64)
        d[self.rows, self.cols] = self.weights
        return d

    def shrink_to(self, kept: IndexSet) -> None:
        kept.validate_bound(self.n_tokens)
        self.live = kept

    def dump_lines(self) -> list[str]:
        """Adjacency as sorted "row col weight" lines for golden tests."""
        return [
            f"{int(r)} {int(c)} {w!r}"
            for r, c, w in zip(self.rows, self.cols, self.weights)
        ]


def normalize(adj: RawAdjacency, grid_h: int, grid_w: int) -> TokenGraph:
    """D^{-1/2} A D^{-1/2} with row-sum degrees, stored sparsely.

    Tokens of zero degree contribute zero rows/columns (their scale factor
    is taken as 0 instead of dividing by zero); such entries are dropped.
    """
    if grid_h * grid_w != adj.n:
        raise ShapeError(f"grid {grid_h}x{grid_w} does not cover {adj.n} tokens")
    deg = adj.row_degrees().astype(np.float64)
    inv_sqrt = np.zeros_like(deg)
    nz = deg > 0
    inv_sqrt[nz] = 1.0 / np.sqrt(deg[nz])
    w = inv_sqrt[adj.rows] * inv_sqrt[adj.cols]
    keep = w > 0
    return TokenGraph(
        n_tokens=adj.n,
        grid_h=grid_h,
        grid_w=grid_w,
        rows=adj.rows[keep].copy(),
        cols=adj.cols[keep].copy(),
        weights=w[keep],
        live=IndexSet(np.arange(adj.n, dtype=np.int64)),
    )


@dataclass(frozen=True)
class PropagationView:
    """Sparse (kept x propagated) slice of a normalized graph."""

    n_kept: int
    n_prop: int
    rows: np.ndarray  # local kept indices
    cols: np.ndarray  # local propagated indices
    weights: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_kept, self.n_prop)

    def to_dense(self) -> np.ndarray:
        d = np.zeros((self.n_kept, self.n_prop), dtype=np.float64)
        d[self.rows, self.cols] = self.weights
        return d

    def matvec(self, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=np.float64)
        if v.shape != (self.n_prop,):
            raise ShapeError(f"expected vector of length {self.n_prop}, got {v.shape}")
        return self.to_dense() @ v

    def matmat(self, x: np.ndarray) -> np.ndarray:
        """Product with a (propagated x channels) block.

        The slice is only (kept x P) with P small, so a densified product
        beats scatter-reduction at every scale this engine runs at.
        """
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[0] != self.n_prop:
            raise ShapeError(f"expected {self.n_prop} rows, got {x.shape}")
        return self.to_dense() @ x


def extract_propagation_view(g: TokenGraph, kept: IndexSet, propagated: IndexSet) -> PropagationView:
    """Slice the normalized adjacency to rows = kept, cols = propagated.

    The two sets must exactly partition the graph's current live set. The
    caller shrinks the live set to `kept` afterwards.
    """
    ki = kept.indices
    pi = propagated.indices
    merged = np.concatenate([ki, pi])
    if np.intersect1d(ki, pi).size:
        raise PartitionError("kept and propagated sets overlap")
    if not np.array_equal(np.sort(merged), g.live.indices):
        raise PartitionError("kept + propagated must equal the live set")
    in_kept = np.isin(g.rows, ki)
    in_prop = np.isin(g.cols, pi)
    keep = in_kept & in_prop
    rows = np.searchsorted(ki, g.rows[keep])
    cols = np.searchsorted(pi, g.cols[keep])
    return PropagationView(
        n_kept=int(ki.size),
        n_prop=int(pi.size),
        rows=rows.astype(np.int64),
        cols=cols.astype(np.int64),
        weights=g.weights[keep].copy(),
    )


def build_graph(kind: GraphKind, x0: np.ndarray, grid_h: int, grid_w: int, m: int) -> TokenGraph | None:
    """Construct the normalized token graph for a forward pass (or None)."""
    if kind is GraphKind.NONE:
        return None
    if kind is GraphKind.SPATIAL:
        raw = build_spatial(grid_h, grid_w)
    elif kind is GraphKind.SEMANTIC:
        raw = build_semantic(x0, m)
    elif kind is GraphKind.MIXED:
        raw = build_mixed(build_spatial(grid_h, grid_w), build_semantic(x0, m))
    else:
        raise ConfigError(f"unknown graph kind: {kind}")
    return normalize(raw, grid_h, grid_w)
