"""Multi-head self-attention with size-proportional bias and top-theta
sparsification of the attention maps.

The attention maps are first-class outputs here: token scoring downstream
reuses them, so `mhsa_forward` returns them alongside the token features.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ArgumentError, ConfigError, ShapeError
from .graph import PropagationView
from .linalg import MacCounter, _softmax_rows

LN_EPS = 1e-6


@dataclass(frozen=True)
class AttentionTensor:
    """Per-head attention maps plus the token size vector.

    maps has shape (heads, n, n); sizes has shape (n,) with every entry
    >= 1. Rows of each head sum to 1 before sparsification; after
    sparsification exactly ceil(theta * n^2) entries per head survive.
    """

    maps: np.ndarray
    sizes: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.maps, dtype=np.float64)
        s = np.asarray(self.sizes, dtype=np.float64)
        if m.ndim != 3 or m.shape[1] != m.shape[2]:
            raise ShapeError(f"attention maps must be (H, N, N), got {m.shape}")
        if s.shape != (m.shape[1],):
            raise ShapeError(f"sizes must have length {m.shape[1]}, got {s.shape}")
        if not np.isfinite(m).all():
            raise ArgumentError("attention maps contain non-finite entries")
        if (s < 1.0).any():
            raise ArgumentError("token sizes must be >= 1")
        object.__setattr__(self, "maps", m)
        object.__setattr__(self, "sizes", s)

    @property
    def heads(self) -> int:
        return int(self.maps.shape[0])

    @property
    def n(self) -> int:
        return int(self.maps.shape[1])


@dataclass(frozen=True)
class BlockWeights:
    """All parameters of one transformer block (float64)."""

    w_qkv: np.ndarray  # (C, 3C)
    b_qkv: np.ndarray  # (3C,)
    w_out: np.ndarray  # (C, C)
    b_out: np.ndarray  # (C,)
    ln1_scale: np.ndarray  # (C,)
    ln1_shift: np.ndarray  # (C,)
    ln2_scale: np.ndarray
    ln2_shift: np.ndarray
    w_fc1: np.ndarray  # (C, 4C)
    b_fc1: np.ndarray  # (4C,)
    w_fc2: np.ndarray  # (4C, C)
    b_fc2: np.ndarray  # (C,)

    def __post_init__(self):
        c = self.w_qkv.shape[0]
        expect = {
            "w_qkv": (c, 3 * c), "b_qkv": (3 * c,),
            "w_out": (c, c), "b_out": (c,),
            "ln1_scale": (c,), "ln1_shift": (c,),
            "ln2_scale": (c,), "ln2_shift": (c,),
            "w_fc1": (c, 4 * c), "b_fc1": (4 * c,),
            "w_fc2": (4 * c, c), "b_fc2": (c,),
        }
        for name, shape in expect.items():
            arr = getattr(self, name)
            if arr.shape != shape:
                raise ShapeError(f"{name} has shape {arr.shape}, expected {shape}")
            if not np.isfinite(arr).all():
                raise ArgumentError(f"{name} contains non-finite entries")


def layer_norm(x: np.ndarray, scale: np.ndarray, shift: np.ndarray) -> np.ndarray:
    mean = x.mean(axis=-1, keepdims=True)
    var = np.mean((x - mean) ** 2, axis=-1, keepdims=True)
    return (x - mean) / np.sqrt(var + LN_EPS) * scale + shift


def gelu(x: np.ndarray) -> np.ndarray:
    """tanh-approximation GELU."""
    return 0.5 * x * (1.0 + np.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x**3)))


def mhsa_forward(
    x: np.ndarray,
    w: BlockWeights,
    sizes: np.ndarray,
    theta: float,
    heads: int,
    counter: MacCounter | None = None,
    tag: str = "mhsa",
) -> tuple[np.ndarray, AttentionTensor]:
    """Multi-head attention over already-normalized token features.

    Per head: A = softmax(Q K^T / sqrt(d_k) + log s), where log s biases
    every key column by that token's size. The maps are sparsified to the
    top ceil(theta*N^2) entries per head before being applied to V and
    returned.
    """
    n, c = x.shape
    if sizes.shape != (n,):
        raise ShapeError(f"sizes must have length {n}, got {sizes.shape}")
    c3 = w.w_qkv.shape[1]
    if c3 != 3 * c:
        raise ShapeError(f"qkv weight expects width {3 * c}, got {c3}")
    h = heads
    if h < 1 or c % h != 0:
        raise ConfigError(f"embed dim {c} not divisible by {h} heads")
    d = c // h

    if counter is not None:
        counter.add(tag, n * c * 3 * c)  # QKV projection
    qkv = x @ w.w_qkv + w.b_qkv
    q, k, v = qkv[:, :c], qkv[:, c : 2 * c], qkv[:, 2 * c :]

    log_s = np.log(sizes)
    scale = 1.0 / math.sqrt(d)
    maps = np.empty((h, n, n), dtype=np.float64)
    for hi in range(h):
        sl = slice(hi * d, (hi + 1) * d)
        if counter is not None:
            counter.add(tag, n * d * n)  # Q K^T
        logits = (q[:, sl] @ k[:, sl].T) * scale + log_s[None, :]
        maps[hi] = _softmax_rows(logits)

    attn = sparsify_attention(AttentionTensor(maps, sizes), theta)

    out = np.empty((n, c), dtype=np.float64)
    for hi in range(h):
        sl = slice(hi * d, (hi + 1) * d)
        if counter is not None:
            counter.add(tag, n * n * d)  # A V
        out[:, sl] = attn.maps[hi] @ v[:, sl]
    if counter is not None:
        counter.add(tag, n * c * c)  # output projection
    out = out @ w.w_out + w.b_out
    return out, attn


def sparsify_attention(a: AttentionTensor, theta: float) -> AttentionTensor:
    """Keep the ceil(theta * n^2) largest entries per head; zero the rest.

    Rows are NOT renormalized afterwards. Ties at the cutoff are broken by
    larger value first, then lower flat index, so the operation is
    deterministic and idempotent. theta=1 returns the input unchanged.
    """
    if not 0.0 <= theta <= 1.0:
        raise ArgumentError(f"theta must be in [0, 1], got {theta}")
    if theta == 1.0:
        return a
    n2 = a.n * a.n
    budget = math.ceil(theta * n2)
    if budget >= n2:
        return a
    maps = np.zeros_like(a.maps)
    for hi in range(a.heads):
        flat = a.maps[hi].ravel()
        if budget > 0:
            order = np.argsort(-flat, kind="stable")
            keep = order[:budget]
            maps[hi].ravel()[keep] = flat[keep]
    return AttentionTensor(maps, a.sizes)


def update_sizes(
    s_kept: np.ndarray,
    s_prop: np.ndarray,
    a_hat_p: PropagationView | None,
    alpha: float,
) -> np.ndarray:
    """s_kept + alpha * A_p @ s_prop — the feature-propagation operator
    applied to the size vector."""
    s_kept = np.asarray(s_kept, dtype=np.float64)
    s_prop = np.asarray(s_prop, dtype=np.float64)
    if alpha == 0.0 or s_prop.size == 0 or a_hat_p is None:
        return s_kept.copy()
    if a_hat_p.shape != (s_kept.size, s_prop.size):
        raise ShapeError(
            f"propagation view {a_hat_p.shape} inconsistent with sizes "
            f"({s_kept.size} kept, {s_prop.size} propagated)"
        )
    return s_kept + alpha * a_hat_p.matvec(s_prop)
