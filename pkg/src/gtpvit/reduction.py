"""Token importance scoring, kept/propagated partitioning and propagation.

Two attention-derived scores drive the selection: the diagonal of the
attention map (how hard a token is to regenerate from the others) and the
off-diagonal column sums (how much a token broadcasts into the others).
Tokens ranking lowest on the product of the two are eliminated each layer,
after pushing their features into graph neighbours that survive.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .attention import AttentionTensor
from .errors import ConfigError, ShapeError, StrategyError
from .graph import GraphKind, PropagationView
from .linalg import IndexSet, argsort_desc
from .rng import SplitMix64


class Strategy(Enum):
    MIXED_ATTN = "MixedAttn"
    DIAG_ATTN = "DiagAttn"
    BROAD_ATTN = "BroadAttn"
    CLS_ATTN = "CLSAttn"
    COS_SIM = "CosSim"
    RANDOM = "Random"


@dataclass(frozen=True)
class ReductionConfig:
    """Per-layer reduction hyperparameters."""

    p_per_layer: int = 0
    alpha: float = 0.25
    graph_kind: GraphKind = GraphKind.MIXED
    theta: float = 1.0
    m_neighbors: int = 8
    aggregator: str = "max"

    def __post_init__(self):
        if self.p_per_layer < 0:
            raise ConfigError("p_per_layer must be >= 0")
        if self.alpha < 0:
            raise ConfigError("alpha must be >= 0")
        if not 0.0 < self.theta <= 1.0:
            raise ConfigError("theta must be in (0, 1]")
        if self.m_neighbors < 1:
            raise ConfigError("m_neighbors must be >= 1")
        if self.aggregator not in ("max", "mean"):
            raise ConfigError(f"unknown aggregator: {self.aggregator!r}")


@dataclass(frozen=True)
class ReductionPlan:
    """Partition of the live rows into kept and propagated, with scores.

    Indices are row positions in the current feature map (the [CLS] row,
    when present, is always in `kept`). `matches` is populated only by the
    CosSim strategy: (src_row, dst_row) merge pairs in merge order.
    """

    kept: IndexSet
    propagated: IndexSet
    scores: np.ndarray
    strategy: Strategy
    matches: tuple[tuple[int, int], ...] | None = None


def _aggregate(per_head: np.ndarray, aggregator: str) -> np.ndarray:
    if aggregator == "max":
        return per_head.max(axis=0)
    if aggregator == "mean":
        return per_head.mean(axis=0)
    raise ConfigError(f"unknown aggregator: {aggregator!r}")


def score_regeneration(attn: AttentionTensor, aggregator: str = "max") -> np.ndarray:
    """Attention-map diagonal per token, aggregated over heads.

    A small value means the token is mostly reconstructed from the others
    and is cheap to drop; the constant shift against 1 - A_ii is omitted
    since only the ranking matters.
    """
    diags = np.einsum("hii->hi", attn.maps)
    return _aggregate(diags, aggregator)


def score_broadcasting(attn: AttentionTensor, aggregator: str = "max") -> np.ndarray:
    """Off-diagonal attention column sums per token, aggregated over heads.

    The per-head column sum is taken first, then heads are fused.
    """
    col_sums = attn.maps.sum(axis=1) - np.einsum("hii->hi", attn.maps)
    return _aggregate(col_sums, aggregator)


def _partition_by_scores(
    scores: np.ndarray, p: int, cls_index: int | None, strategy: Strategy
) -> ReductionPlan:
    n = scores.size
    scoreable = np.arange(n)
    if cls_index is not None:
        scoreable = np.delete(scoreable, cls_index)
    if p >= scoreable.size:
        raise ConfigError(f"p={p} leaves no scoreable token ({scoreable.size} available)")
    order = argsort_desc(scores[scoreable])
    kept_rows = scoreable[order[: scoreable.size - p]]
    prop_rows = scoreable[order[scoreable.size - p :]]
    if cls_index is not None:
        kept_rows = np.append(kept_rows, cls_index)
    return ReductionPlan(
        kept=IndexSet.of(kept_rows),
        propagated=IndexSet.of(prop_rows),
        scores=scores.copy(),
        strategy=strategy,
    )


def select_tokens(
    gamma: np.ndarray, psi: np.ndarray, p: int, cls_index: int | None = None
) -> ReductionPlan:
    """Keep the tokens with the largest gamma*psi products; propagate the
    p lowest. The [CLS] row never participates and is always kept."""
    gamma = np.asarray(gamma, dtype=np.float64)
    psi = np.asarray(psi, dtype=np.float64)
    if gamma.shape != psi.shape or gamma.ndim != 1:
        raise ShapeError(f"score shapes differ: {gamma.shape} vs {psi.shape}")
    return _partition_by_scores(gamma * psi, p, cls_index, Strategy.MIXED_ATTN)


def propagate(
    x: np.ndarray,
    plan: ReductionPlan,
    a_hat_p: PropagationView | None,
    alpha: float,
    cls_index: int | None = None,
) -> np.ndarray:
    """X_kept + alpha * A_p @ X_prop, rows ordered by the kept index set.

    With alpha = 0 (or no graph) this is exact row selection — pure
    pruning, bit for bit. The [CLS] row is outside the graph and passes
    through unchanged.
    """
    kept_rows = plan.kept.indices
    prop_rows = plan.propagated.indices
    if kept_rows.size + prop_rows.size != x.shape[0]:
        raise ShapeError(
            f"plan covers {kept_rows.size + prop_rows.size} rows, features have {x.shape[0]}"
        )
    out = x[kept_rows].copy()
    if alpha == 0.0 or a_hat_p is None or prop_rows.size == 0:
        return out
    img_mask = np.ones(kept_rows.size, dtype=bool)
    if cls_index is not None:
        img_mask[np.searchsorted(kept_rows, cls_index)] = False
    if a_hat_p.shape != (int(img_mask.sum()), prop_rows.size):
        raise ShapeError(
            f"propagation view {a_hat_p.shape} inconsistent with plan "
            f"({int(img_mask.sum())} kept image rows, {prop_rows.size} propagated)"
        )
    out[img_mask] += alpha * a_hat_p.matmat(x[prop_rows])
    return out


def select_tokens_baseline(
    strategy: Strategy,
    attn: AttentionTensor,
    x: np.ndarray,
    p: int,
    seed: int,
    cls_index: int | None = None,
    aggregator: str = "max",
) -> ReductionPlan:
    """Comparison selection strategies; all remove exactly p tokens."""
    n = attn.n
    if x.shape[0] != n:
        raise ShapeError(f"features have {x.shape[0]} rows, attention has {n}")
    if strategy is Strategy.MIXED_ATTN:
        return select_tokens(
            score_regeneration(attn, aggregator), score_broadcasting(attn, aggregator), p, cls_index
        )
    if strategy is Strategy.DIAG_ATTN:
        scores = score_regeneration(attn, aggregator)
    elif strategy is Strategy.BROAD_ATTN:
        scores = score_broadcasting(attn, aggregator)
    elif strategy is Strategy.CLS_ATTN:
        if cls_index is None:
            raise StrategyError("CLSAttn requires a [CLS] token")
        scores = _aggregate(attn.maps[:, cls_index, :], aggregator)
    elif strategy is Strategy.RANDOM:
        rng = SplitMix64(seed)
        scores = np.array([rng.next_float() for _ in range(n)])
    elif strategy is Strategy.COS_SIM:
        return _cosine_match(x, attn.sizes, p, cls_index)
    else:
        raise StrategyError(f"unknown strategy: {strategy}")
    return _partition_by_scores(scores, p, cls_index, strategy)


def _cosine_match(
    x: np.ndarray, sizes: np.ndarray, p: int, cls_index: int | None
) -> ReductionPlan:
    """Bipartite soft matching: alternate rows into src/dst partitions,
    find each src token's best cosine match in dst, and mark the p
    highest-similarity src tokens for merging into their matches."""
    n = x.shape[0]
    src_rows = np.arange(0, n, 2)
    dst_rows = np.arange(1, n, 2)
    limit = src_rows.size - (1 if cls_index is not None and cls_index % 2 == 0 else 0)
    if p > min(limit, dst_rows.size):
        raise ConfigError(f"p={p} exceeds the bipartite matching capacity of {n} tokens")
    norms = np.linalg.norm(x, axis=1)
    safe = np.where(norms == 0.0, 1.0, norms)
    unit = x / safe[:, None]
    sims = unit[src_rows] @ unit[dst_rows].T
    if cls_index is not None and cls_index % 2 == 0:
        sims[np.searchsorted(src_rows, cls_index), :] = -np.inf
    best = sims.argmax(axis=1)
    best_sim = sims[np.arange(src_rows.size), best]
    order = np.argsort(-np.where(np.isfinite(best_sim), best_sim, -np.inf), kind="stable")
    merged_local = order[:p]
    prop_rows = src_rows[merged_local]
    matches = tuple(
        (int(src_rows[i]), int(dst_rows[best[i]])) for i in merged_local
    )
    kept_rows = np.setdiff1d(np.arange(n), prop_rows)
    scores = np.zeros(n, dtype=np.float64)
    finite = np.isfinite(best_sim)
    scores[src_rows[finite]] = best_sim[finite]
    return ReductionPlan(
        kept=IndexSet.of(kept_rows),
        propagated=IndexSet.of(prop_rows),
        scores=scores,
        strategy=Strategy.COS_SIM,
        matches=matches,
    )


def apply_merge(
    x: np.ndarray, sizes: np.ndarray, plan: ReductionPlan
) -> tuple[np.ndarray, np.ndarray]:
    """Merge each matched src row into its dst row by size-weighted
    average, then drop the src rows. Returns (features, sizes) over the
    kept rows in plan order."""
    if plan.matches is None:
        raise StrategyError("plan has no merge matches")
    x = x.copy()
    sizes = sizes.copy()
    for src, dst in plan.matches:
        total = sizes[src] + sizes[dst]
        x[dst] = (sizes[dst] * x[dst] + sizes[src] * x[src]) / total
        sizes[dst] = total
    kept = plan.kept.indices
    return x[kept], sizes[kept]


def plan_csv_lines(layer: int, plan: ReductionPlan, token_ids_of_row) -> str:
    """One CSV record: layer, kept ids, propagated ids, per-token scores."""
    buf = io.StringIO()
    writer = csv.writer(buf)
    kept_ids = [token_ids_of_row(r) for r in plan.kept]
    prop_ids = [token_ids_of_row(r) for r in plan.propagated]
    writer.writerow(
        [
            layer,
            " ".join(str(i) for i in kept_ids if i is not None),
            " ".join(str(i) for i in prop_ids if i is not None),
            " ".join(f"{s:.9g}" for s in plan.scores),
        ]
    )
    return buf.getvalue()
