"""Closed-form MACs accounting for the backbone and the reduction overhead.

Backbone cost per block with N_l tokens entering attention and N_l - P
entering the FFN:

    4*N_l*C^2   (QKV + output projections)
  + 2*N_l^2*C   (Q K^T and A V)
  + 8*(N_l-P)*C^2   (FFN at ratio 4)

plus the patch embedding and the classifier head. Softmax, LayerNorm and
activations are excluded, as is conventional for MAC counts.

The reduction-overhead closed forms are kept exactly as published, and the
direct per-layer summations are exposed alongside them as independent
oracles. Note: the published token-matching closed form's quadratic-in-M
term does not algebraically match its own per-layer summation (the exact
expansion of sum (l-1)^2 / 4 is L^3/12 - L^2/8 + L/24); the closed form
is reproduced verbatim because the published MMAC totals follow from it.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from fractions import Fraction
from typing import TYPE_CHECKING

from .errors import ConfigError
from .reduction import Strategy

if TYPE_CHECKING:
    from .runtime import Diagnostics, ModelConfig

MMACS = 10**6
GMACS = 10**9


def _validate(n: int, l: int, c: int, m: int, h: int | None = None) -> None:
    if n < 1 or l < 1 or c < 1 or (h is not None and h < 1):
        raise ConfigError("n, l, h, c must be positive")
    if m < 0:
        raise ConfigError("m must be >= 0")
    if l * m >= n:
        raise ConfigError(f"schedule infeasible: {l} layers x m={m} >= {n} tokens")


def overhead_gtp(n: int, l: int, h: int, c: int, m: int) -> float:
    """Total extra MACs for graph-propagation reduction, closed form.

    One-off semantic graph build (N^2 C), per-layer scoring (H N_l) and
    per-layer propagation ((N_l - M) M C), summed in closed form.
    """
    _validate(n, l, c, m, h)
    total = (
        n * n * c
        + l * h * n
        + l * m * n * c
        - (l * l - l) * h * m // 2
        - (l + l * l) * m * m * c // 2
    )
    return float(total)


def overhead_gtp_summation(n: int, l: int, h: int, c: int, m: int) -> float:
    """Direct per-layer summation oracle for overhead_gtp."""
    _validate(n, l, c, m, h)
    total = n * n * c
    for li in range(1, l + 1):
        n_l = n - (li - 1) * m
        total += h * n_l + (n_l - m) * m * c
    return float(total)


def overhead_tome(n: int, l: int, c: int, m: int) -> float:
    """Total extra MACs for bipartite-matching reduction, closed form.

    Per-layer matching costs N_l^2 C / 4 and merging costs M C; the
    closed form is the published expansion (see module docstring for the
    known discrepancy against the exact summation).
    """
    _validate(n, l, c, m)
    total = (
        Fraction(1, 4) * l * n * n * c
        + Fraction(1, 4) * (l - l * l) * n * m * c
        + (Fraction(l**3, 12) + Fraction(l**2, 12) + Fraction(l, 8)) * m * m * c
        + l * m * c
    )
    return float(total)


def overhead_tome_summation(n: int, l: int, c: int, m: int) -> float:
    """Direct per-layer summation oracle: sum_l (N_l^2 C / 4 + M C)."""
    _validate(n, l, c, m)
    total = Fraction(0)
    for li in range(1, l + 1):
        n_l = n - (li - 1) * m
        total += Fraction(n_l * n_l * c, 4) + m * c
    return float(total)


@dataclass(frozen=True)
class CostReport:
    """MACs breakdown for one (config, strategy) point."""

    per_layer: tuple[int, ...]
    embed_macs: int
    head_macs: int
    backbone_macs: int
    overhead_macs: float
    parameters: dict

    @property
    def grand_total(self) -> float:
        return self.backbone_macs + self.overhead_macs

    def to_json(self) -> str:
        doc = {
            "backbone_macs": self.backbone_macs,
            "backbone_gmacs": self.backbone_macs / GMACS,
            "embed_macs": self.embed_macs,
            "grand_total_macs": self.grand_total,
            "head_macs": self.head_macs,
            "overhead_macs": self.overhead_macs,
            "overhead_mmacs": self.overhead_macs / MMACS,
            "parameters": dict(sorted(self.parameters.items())),
            "per_layer_macs": list(self.per_layer),
        }
        return json.dumps(doc, sort_keys=True, indent=2)

    def csv_row(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        p = self.parameters
        w.writerow(
            [
                p.get("preset", ""), p["N"], p["L"], p["H"], p["C"], p["M"],
                f"{self.backbone_macs / GMACS:.6f}",
                f"{self.overhead_macs / MMACS:.6f}",
                f"{self.grand_total / GMACS:.6f}",
            ]
        )
        return buf.getvalue()


def backbone_macs(cfg: "ModelConfig", strategy: Strategy = Strategy.MIXED_ATTN,
                  preset_name: str = "") -> CostReport:
    """Analytical MACs for a full forward under cfg's token schedule."""
    c = cfg.embed_dim
    p = cfg.reduction.p_per_layer
    n = cfg.total_tokens
    per_layer = []
    for l in range(cfg.depth):
        n_l = n - l * p
        n_next = n_l - p
        macs = 4 * n_l * c * c + 2 * n_l * n_l * c + 8 * n_next * c * c
        per_layer.append(macs)
    embed = cfg.img_tokens * cfg.patch_dim * c
    head = c * cfg.num_classes
    backbone = sum(per_layer) + embed + head
    if strategy is Strategy.COS_SIM:
        overhead = overhead_tome(n, cfg.depth, c, p)
    else:
        overhead = overhead_gtp(n, cfg.depth, cfg.heads, c, p)
    params = {
        "N": n, "N_img": cfg.img_tokens, "L": cfg.depth, "H": cfg.heads,
        "C": c, "M": p, "mlp_ratio": cfg.mlp_ratio, "strategy": strategy.value,
    }
    if preset_name:
        params["preset"] = preset_name
    return CostReport(
        per_layer=tuple(per_layer),
        embed_macs=embed,
        head_macs=head,
        backbone_macs=backbone,
        overhead_macs=overhead,
        parameters=params,
    )


def empirical_mac_count(trace: "Diagnostics") -> int:
    """Total multiply-accumulates recorded by the instrumented forward."""
    return trace.counter.total()
