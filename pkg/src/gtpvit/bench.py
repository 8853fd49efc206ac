"""Micro-benchmark of per-layer reduction work: graph propagation versus
bipartite matching, at matched token count, width and reduction size.

The propagation side starts from the attention maps (already produced by
the attention layer), scores and selects tokens, slices the graph and
propagates. The matching side normalizes features, computes the bipartite
similarity matrix, picks the best matches and merges. Wall-clock medians
over repeated runs give a directional comparison; absolute numbers are
hardware-bound.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import reduction as red_mod
from .attention import AttentionTensor, update_sizes
from .complexity import MMACS, overhead_gtp, overhead_tome
from .errors import ArgumentError
from .graph import GraphKind, TokenGraph, build_graph, extract_propagation_view
from .linalg import IndexSet
from .rng import SplitMix64, substream


@dataclass(frozen=True)
class OverheadBench:
    """Timing result for one (n, c, p) comparison point."""

    n: int
    c: int
    heads: int
    p: int
    repeats: int
    gtp_median_s: float
    gtp_spread_s: float
    tome_median_s: float
    tome_spread_s: float
    gtp_analytic_mmacs: float
    tome_analytic_mmacs: float

    @property
    def gtp_leads(self) -> bool:
        return self.gtp_median_s <= self.tome_median_s


def _median_spread(samples: list[float]) -> tuple[float, float]:
    arr = np.sort(np.asarray(samples))
    median = float(np.median(arr))
    q1, q3 = np.percentile(arr, [25, 75])
    return median, float(q3 - q1)


def _synthetic_state(n: int, c: int, heads: int, m: int, seed: int, has_cls: bool):
    """Random features, softmaxed attention maps and a mixed graph."""
    rng = substream(seed, 77)
    n_img = n - (1 if has_cls else 0)
    side = int(np.sqrt(n_img))
    if side * side != n_img:
        raise ArgumentError(f"benchmark token count {n} needs a square image grid")
    x = rng.fill_uniform(n * c, -1.0, 1.0).reshape(n, c)
    logits = rng.fill_uniform(heads * n * n, -3.0, 3.0).reshape(heads, n, n)
    e = np.exp(logits - logits.max(axis=2, keepdims=True))
    maps = e / e.sum(axis=2, keepdims=True)
    sizes = np.ones(n)
    attn = AttentionTensor(maps, sizes)
    graph = build_graph(GraphKind.MIXED, x[1 if has_cls else 0 :], side, side, m)
    return x, attn, sizes, graph


def gtp_reduction_step(
    attn: AttentionTensor,
    x: np.ndarray,
    sizes: np.ndarray,
    graph: TokenGraph,
    token_ids: np.ndarray,
    p: int,
    alpha: float,
    cls_index: int | None,
) -> np.ndarray:
    """One layer of score + select + slice + propagate."""
    gamma = red_mod.score_regeneration(attn)
    psi = red_mod.score_broadcasting(attn)
    plan = red_mod.select_tokens(gamma, psi, p, cls_index)
    offset = 1 if cls_index is not None else 0
    kept_rows = plan.kept.indices
    kept_ids = token_ids[kept_rows[kept_rows >= offset] - offset]
    prop_ids = token_ids[plan.propagated.indices - offset]
    view = extract_propagation_view(graph, IndexSet(kept_ids), IndexSet(prop_ids))
    out = red_mod.propagate(x, plan, view, alpha, cls_index)
    img_kept = kept_rows[kept_rows >= offset]
    update_sizes(sizes[img_kept], sizes[plan.propagated.indices], view, alpha)
    return out


def tome_reduction_step(
    x: np.ndarray, sizes: np.ndarray, p: int, cls_index: int | None
) -> np.ndarray:
    """One layer of bipartite matching + size-weighted merging."""
    plan = red_mod.select_tokens_baseline(
        red_mod.Strategy.COS_SIM, _feature_only_attention(x, sizes), x, p, 0, cls_index
    )
    merged, _ = red_mod.apply_merge(x, sizes, plan)
    return merged


def _feature_only_attention(x: np.ndarray, sizes: np.ndarray) -> AttentionTensor:
    # The matching baseline never reads the maps; a 1x(n)x(n) identity
    # placeholder keeps the shared signature without attention cost.
    n = x.shape[0]
    return AttentionTensor(np.eye(n)[None, :, :], sizes)


def bench_overhead(
    n: int = 785,
    c: int = 768,
    heads: int = 12,
    p: int = 20,
    m: int = 8,
    alpha: float = 0.25,
    repeats: int = 30,
    seed: int = 42,
    has_cls: bool = True,
    layers_analytic: int = 12,
) -> OverheadBench:
    """Median per-layer wall time of both reduction styles at one point."""
    if repeats < 10:
        raise ArgumentError("repeats must be >= 10")
    x, attn, sizes, graph = _synthetic_state(n, c, heads, m, seed, has_cls)
    token_ids = np.arange(n - (1 if has_cls else 0), dtype=np.int64)
    cls_index = 0 if has_cls else None

    gtp_times, tome_times = [], []
    for _ in range(2):  # warm-up both paths
        gtp_reduction_step(attn, x, sizes, graph, token_ids, p, alpha, cls_index)
        tome_reduction_step(x, sizes, p, cls_index)
    placeholder = _feature_only_attention(x, sizes)
    for _ in range(repeats):
        t0 = time.perf_counter()
        gtp_reduction_step(attn, x, sizes, graph, token_ids, p, alpha, cls_index)
        gtp_times.append(time.perf_counter() - t0)
        t0 = time.perf_counter()
        plan = red_mod.select_tokens_baseline(
            red_mod.Strategy.COS_SIM, placeholder, x, p, 0, cls_index
        )
        red_mod.apply_merge(x, sizes, plan)
        tome_times.append(time.perf_counter() - t0)

    gtp_med, gtp_spread = _median_spread(gtp_times)
    tome_med, tome_spread = _median_spread(tome_times)
    return OverheadBench(
        n=n,
        c=c,
        heads=heads,
        p=p,
        repeats=repeats,
        gtp_median_s=gtp_med,
        gtp_spread_s=gtp_spread,
        tome_median_s=tome_med,
        tome_spread_s=tome_spread,
        gtp_analytic_mmacs=overhead_gtp(n, layers_analytic, heads, c, p) / MMACS,
        tome_analytic_mmacs=overhead_tome(n, layers_analytic, c, p) / MMACS,
    )
