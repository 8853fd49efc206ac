"""Toy-scale ViT forward pass with per-block token reduction.

Covers deterministic fixture generation (weights + synthetic image from a
single 64-bit seed), the binary weight-store format, the block loop with
graph construction/propagation, and per-layer diagnostics.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from . import attention as attn_mod
from . import graph as graph_mod
from . import reduction as red_mod
from .attention import BlockWeights, layer_norm, gelu
from .errors import ArgumentError, ConfigError, DegenerateInputError, FormatError, SchemaError, ShapeError
from .graph import GraphKind
from .linalg import IndexSet, MacCounter, Matrix
from .reduction import ReductionConfig, Strategy
from .rng import STREAM_IMAGE, STREAM_SELECT, STREAM_WEIGHTS, substream

MAGIC = b"GTPW"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    """Architecture plus reduction settings for one model."""

    image_size: int
    patch_size: int
    embed_dim: int
    depth: int
    heads: int
    has_cls: bool
    mlp_ratio: int = 4
    num_classes: int = 1000
    gap_weighted: bool = True
    reduction: ReductionConfig = field(default_factory=ReductionConfig)

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ConfigError(
                f"image size {self.image_size} not divisible by patch size {self.patch_size}"
            )
        if self.embed_dim % self.heads != 0:
            raise ConfigError(f"embed dim {self.embed_dim} not divisible by {self.heads} heads")
        if self.mlp_ratio != 4:
            raise ConfigError("mlp_ratio is fixed at 4")
        if self.depth < 1:
            raise ConfigError("depth must be >= 1")
        if self.depth * self.reduction.p_per_layer >= self.img_tokens:
            raise ConfigError(
                f"schedule infeasible: {self.depth} layers x P={self.reduction.p_per_layer} "
                f"would exhaust {self.img_tokens} image tokens"
            )

    @property
    def grid_h(self) -> int:
        return self.image_size // self.patch_size

    @property
    def grid_w(self) -> int:
        return self.image_size // self.patch_size

    @property
    def img_tokens(self) -> int:
        return self.grid_h * self.grid_w

    @property
    def total_tokens(self) -> int:
        return self.img_tokens + (1 if self.has_cls else 0)

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * 3


_PRESETS = {
    "deit-s": dict(image_size=224, patch_size=16, embed_dim=384, depth=12, heads=6, has_cls=True),
    "deit-b": dict(image_size=224, patch_size=16, embed_dim=768, depth=12, heads=12, has_cls=True),
    "vitm-gap": dict(image_size=256, patch_size=16, embed_dim=512, depth=12, heads=8, has_cls=False),
}


def preset(name: str, reduction: ReductionConfig | None = None, **overrides) -> ModelConfig:
    """Named architecture presets: deit-s, deit-b, vitm-gap."""
    if name not in _PRESETS:
        raise ConfigError(f"unknown preset {name!r}; available: {sorted(_PRESETS)}")
    kwargs = dict(_PRESETS[name])
    kwargs.update(overrides)
    return ModelConfig(reduction=reduction or ReductionConfig(), **kwargs)


def preset_names() -> list[str]:
    return sorted(_PRESETS)


@dataclass
class FeatureMap:
    """Live token embeddings with identity bookkeeping.

    `token_ids` are the original patch-grid indices of the surviving image
    tokens; the [CLS] row, when present, sits at row 0 and has no id.
    """

    tokens: Matrix
    token_ids: np.ndarray
    sizes: np.ndarray

    def __post_init__(self):
        ids = np.asarray(self.token_ids, dtype=np.int64)
        if ids.size > 1 and not (np.diff(ids) > 0).all():
            raise ArgumentError("token_ids must be strictly increasing")
        s = np.asarray(self.sizes, dtype=np.float64)
        if s.shape != (self.tokens.rows,):
            raise ShapeError("sizes length must match token rows")
        object.__setattr__(self, "token_ids", ids)
        object.__setattr__(self, "sizes", s)


class WeightStore:
    """Ordered map of tensor name -> float32 array."""

    def __init__(self):
        self._tensors: dict[str, np.ndarray] = {}

    def put(self, name: str, value: np.ndarray) -> None:
        self._tensors[name] = np.ascontiguousarray(value, dtype=np.float32)

    def get(self, name: str) -> np.ndarray:
        if name not in self._tensors:
            raise SchemaError(f"missing weight tensor {name!r}")
        return self._tensors[name]

    def names(self) -> list[str]:
        return list(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def __eq__(self, other) -> bool:
        if not isinstance(other, WeightStore):
            return NotImplemented
        return self.names() == other.names() and all(
            np.array_equal(self._tensors[k], other._tensors[k]) for k in self._tensors
        )

    def to_bytes(self) -> bytes:
        out = bytearray()
        out += MAGIC
        out += struct.pack("<II", FORMAT_VERSION, len(self._tensors))
        for name, arr in self._tensors.items():
            encoded = name.encode("utf-8")
            out += struct.pack("<I", len(encoded))
            out += encoded
            out += struct.pack("<I", arr.ndim)
            out += struct.pack(f"<{arr.ndim}I", *arr.shape)
            out += arr.astype("<f4").tobytes(order="C")
        return bytes(out)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "WeightStore":
        if blob[:4] != MAGIC:
            raise FormatError("bad magic", 0)
        off = 4

        def take(fmt: str, count: int):
            nonlocal off
            size = struct.calcsize(fmt)
            if off + size > len(blob):
                raise FormatError("truncated file", off)
            vals = struct.unpack_from(fmt, blob, off)
            off += size
            return vals if count > 1 else vals[0]

        version = take("<I", 1)
        if version != FORMAT_VERSION:
            raise FormatError(f"unsupported version {version}", 4)
        count = take("<I", 1)
        store = cls()
        for _ in range(count):
            name_len = take("<I", 1)
            if off + name_len > len(blob):
                raise FormatError("truncated tensor name", off)
            name = blob[off : off + name_len].decode("utf-8")
            off += name_len
            ndim = take("<I", 1)
            if ndim > 8:
                raise FormatError(f"implausible ndim {ndim}", off - 4)
            dims = take(f"<{ndim}I", ndim) if ndim else ()
            if ndim == 1:
                dims = (dims,)
            n_elems = 1
            for d in dims:
                n_elems *= d
            if n_elems > (1 << 31):
                raise FormatError("tensor dimension overflow", off)
            payload = n_elems * 4
            if off + payload > len(blob):
                raise FormatError("truncated tensor payload", off)
            arr = np.frombuffer(blob[off : off + payload], dtype="<f4").reshape(dims)
            off += payload
            store.put(name, arr)
        if off != len(blob):
            raise FormatError("trailing bytes after last tensor", off)
        return store

    def sha256(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()


def save_weights(store: WeightStore, path) -> None:
    with open(path, "wb") as fh:
        fh.write(store.to_bytes())


def load_weights(path) -> WeightStore:
    with open(path, "rb") as fh:
        return WeightStore.from_bytes(fh.read())


def _tensor_schema(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...], bool]]:
    """(name, shape, drawn) triples in stream order; LN params are constant."""
    c = cfg.embed_dim
    schema: list[tuple[str, tuple[int, ...], bool]] = [
        ("embed.weight", (cfg.patch_dim, c), True),
        ("embed.bias", (c,), True),
    ]
    for l in range(cfg.depth):
        schema += [
            (f"block{l}.qkv.weight", (c, 3 * c), True),
            (f"block{l}.qkv.bias", (3 * c,), True),
            (f"block{l}.out.weight", (c, c), True),
            (f"block{l}.out.bias", (c,), True),
            (f"block{l}.ln1.weight", (c,), False),
            (f"block{l}.ln1.bias", (c,), False),
            (f"block{l}.ln2.weight", (c,), False),
            (f"block{l}.ln2.bias", (c,), False),
            (f"block{l}.fc1.weight", (c, 4 * c), True),
            (f"block{l}.fc1.bias", (4 * c,), True),
            (f"block{l}.fc2.weight", (4 * c, c), True),
            (f"block{l}.fc2.bias", (c,), True),
        ]
    schema += [
        ("head.weight", (c, cfg.num_classes), True),
        ("head.bias", (cfg.num_classes,), True),
    ]
    return schema


def generate_fixture(seed: int, cfg: ModelConfig) -> tuple[WeightStore, np.ndarray]:
    """Deterministic weights and synthetic image from one 64-bit seed.

    Weights are drawn uniformly in [-0.05, 0.05] from the weight substream
    in schema order (LayerNorm scales are 1 and shifts 0, not drawn);
    image pixels are uniform in [0, 1) from the image substream. The
    resulting store bytes are identical across platforms.
    """
    stream = substream(seed, STREAM_WEIGHTS)
    store = WeightStore()
    for name, shape, drawn in _tensor_schema(cfg):
        if drawn:
            n = int(np.prod(shape))
            vals = stream.fill_uniform(n, -0.05, 0.05).reshape(shape)
        elif name.endswith("weight"):
            vals = np.ones(shape)
        else:
            vals = np.zeros(shape)
        store.put(name, vals)
    img_stream = substream(seed, STREAM_IMAGE)
    image = img_stream.fill_uniform(cfg.image_size * cfg.image_size * 3).reshape(
        cfg.image_size, cfg.image_size, 3
    )
    return store, image


def validate_store(store: WeightStore, cfg: ModelConfig) -> None:
    for name, shape, _ in _tensor_schema(cfg):
        arr = store.get(name)
        if arr.shape != shape:
            raise SchemaError(f"tensor {name!r} has shape {arr.shape}, expected {shape}")


def block_weights(store: WeightStore, l: int) -> BlockWeights:
    g = lambda suffix: store.get(f"block{l}.{suffix}").astype(np.float64)
    return BlockWeights(
        w_qkv=g("qkv.weight"), b_qkv=g("qkv.bias"),
        w_out=g("out.weight"), b_out=g("out.bias"),
        ln1_scale=g("ln1.weight"), ln1_shift=g("ln1.bias"),
        ln2_scale=g("ln2.weight"), ln2_shift=g("ln2.bias"),
        w_fc1=g("fc1.weight"), b_fc1=g("fc1.bias"),
        w_fc2=g("fc2.weight"), b_fc2=g("fc2.bias"),
    )


def patch_embed(image: np.ndarray, cfg: ModelConfig, store: WeightStore,
                counter: MacCounter | None = None) -> np.ndarray:
    """Flatten 16x16x3 patches row-major and project linearly."""
    img = np.asarray(image, dtype=np.float64)
    expected = (cfg.image_size, cfg.image_size, 3)
    if img.shape != expected:
        raise ShapeError(f"image shape {img.shape}, expected {expected}")
    p = cfg.patch_size
    gh, gw = cfg.grid_h, cfg.grid_w
    patches = img.reshape(gh, p, gw, p, 3).transpose(0, 2, 1, 3, 4).reshape(cfg.img_tokens, cfg.patch_dim)
    w = store.get("embed.weight").astype(np.float64)
    b = store.get("embed.bias").astype(np.float64)
    if counter is not None:
        counter.add("embed", cfg.img_tokens * cfg.patch_dim * cfg.embed_dim)
    return patches @ w + b


def oversmoothing_metric(x_img: np.ndarray) -> float:
    """Mean cosine similarity over unordered pairs of image tokens."""
    x = np.asarray(x_img, dtype=np.float64)
    n = x.shape[0]
    if n < 2:
        raise DegenerateInputError("oversmoothing metric needs at least 2 tokens")
    norms = np.linalg.norm(x, axis=1)
    if (norms == 0.0).any():
        raise DegenerateInputError("zero-norm token row")
    unit = x / norms[:, None]
    sims = np.clip(unit @ unit.T, -1.0, 1.0)
    iu = np.triu_indices(n, k=1)
    return float(sims[iu].mean())


@dataclass
class Diagnostics:
    """Per-layer trace of one forward pass."""

    live_counts: list[int] = field(default_factory=list)
    kept_ids: list[np.ndarray] = field(default_factory=list)
    propagated_ids: list[np.ndarray] = field(default_factory=list)
    plans: list[red_mod.ReductionPlan] = field(default_factory=list)
    oversmoothing: list[float] = field(default_factory=list)
    graph_builds: int = 0
    counter: MacCounter = field(default_factory=MacCounter)

    def block_macs(self, depth: int) -> list[int]:
        return [self.counter.by_tag.get(f"block{l}", 0) for l in range(depth)]


def forward(
    cfg: ModelConfig,
    store: WeightStore,
    image: np.ndarray | FeatureMap,
    strategy: Strategy = Strategy.MIXED_ATTN,
    strategy_seed: int = 0,
    collect_oversmoothing: bool = True,
) -> tuple[np.ndarray, Diagnostics]:
    """Run the full model: embed, L reduced blocks, final norm, classify.

    Returns the logits and a Diagnostics trace (live counts, plans,
    oversmoothing per layer, MAC counts per component, graph builds).
    """
    validate_store(store, cfg)
    diag = Diagnostics()
    red = cfg.reduction

    if isinstance(image, FeatureMap):
        if image.tokens.cols != cfg.embed_dim or image.tokens.rows != cfg.img_tokens:
            raise ShapeError(
                f"pre-embedded features must be {cfg.img_tokens}x{cfg.embed_dim}, "
                f"got {image.tokens.rows}x{image.tokens.cols}"
            )
        x_img = image.tokens.data.copy()
    else:
        x_img = patch_embed(image, cfg, store, diag.counter)

    p = red.p_per_layer
    needs_graph = p > 0 and red.graph_kind is not GraphKind.NONE and strategy is not Strategy.COS_SIM
    g = None
    if needs_graph:
        g = graph_mod.build_graph(red.graph_kind, x_img, cfg.grid_h, cfg.grid_w, red.m_neighbors)
        diag.graph_builds += 1
    # With no graph the propagation term is defined to vanish.
    alpha_eff = red.alpha if g is not None else 0.0

    offset = 1 if cfg.has_cls else 0
    cls_row = 0 if cfg.has_cls else None
    if cfg.has_cls:
        x = np.vstack([np.zeros((1, cfg.embed_dim)), x_img])
    else:
        x = x_img
    sizes = np.ones(x.shape[0], dtype=np.float64)
    token_ids = np.arange(cfg.img_tokens, dtype=np.int64)

    select_stream = substream(strategy_seed, STREAM_SELECT)

    for l in range(cfg.depth):
        bw = block_weights(store, l)
        tag = f"block{l}"
        h = layer_norm(x, bw.ln1_scale, bw.ln1_shift)
        attn_out, attn = attn_mod.mhsa_forward(
            h, bw, sizes, red.theta, cfg.heads, diag.counter, tag
        )
        x = x + attn_out

        if p > 0:
            layer_seed = select_stream.next_u64()
            if strategy is Strategy.MIXED_ATTN:
                plan = red_mod.select_tokens(
                    red_mod.score_regeneration(attn, red.aggregator),
                    red_mod.score_broadcasting(attn, red.aggregator),
                    p,
                    cls_row,
                )
            else:
                plan = red_mod.select_tokens_baseline(
                    strategy, attn, x, p, layer_seed, cls_row, red.aggregator
                )
            kept_rows = plan.kept.indices
            prop_rows = plan.propagated.indices
            kept_img_ids = token_ids[kept_rows[kept_rows >= offset] - offset]
            prop_img_ids = token_ids[prop_rows - offset]

            if strategy is Strategy.COS_SIM:
                x, sizes = red_mod.apply_merge(x, sizes, plan)
            else:
                view = None
                if g is not None and alpha_eff > 0.0:
                    view = graph_mod.extract_propagation_view(
                        g, IndexSet(kept_img_ids), IndexSet(prop_img_ids)
                    )
                x = red_mod.propagate(x, plan, view, alpha_eff, cls_row)
                img_kept_local = kept_rows[kept_rows >= offset]
                new_img_sizes = attn_mod.update_sizes(
                    sizes[img_kept_local], sizes[prop_rows], view, alpha_eff
                )
                sizes = np.concatenate([sizes[:offset], new_img_sizes])
            if g is not None:
                g.shrink_to(IndexSet(kept_img_ids))
            token_ids = kept_img_ids
            diag.plans.append(plan)
            diag.kept_ids.append(kept_img_ids.copy())
            diag.propagated_ids.append(prop_img_ids.copy())
        else:
            diag.plans.append(None)
            diag.kept_ids.append(token_ids.copy())
            diag.propagated_ids.append(np.empty(0, dtype=np.int64))

        h2 = layer_norm(x, bw.ln2_scale, bw.ln2_shift)
        n_now = x.shape[0]
        diag.counter.add(tag, n_now * cfg.embed_dim * 4 * cfg.embed_dim)
        f = gelu(h2 @ bw.w_fc1 + bw.b_fc1)
        diag.counter.add(tag, n_now * 4 * cfg.embed_dim * cfg.embed_dim)
        x = x + (f @ bw.w_fc2 + bw.b_fc2)

        if not np.isfinite(x).all():
            raise ArgumentError(f"non-finite features after block {l}")
        diag.live_counts.append(int(token_ids.size))
        if collect_oversmoothing and token_ids.size >= 2:
            diag.oversmoothing.append(oversmoothing_metric(x[offset:]))
        else:
            diag.oversmoothing.append(float("nan"))

    xf = layer_norm(x, np.ones(cfg.embed_dim), np.zeros(cfg.embed_dim))
    if cfg.has_cls:
        pooled = xf[0]
    else:
        if cfg.gap_weighted:
            wts = sizes / sizes.sum()
            pooled = wts @ xf
        else:
            pooled = xf.mean(axis=0)
    w_head = store.get("head.weight").astype(np.float64)
    b_head = store.get("head.bias").astype(np.float64)
    diag.counter.add("head", cfg.embed_dim * cfg.num_classes)
    logits = pooled @ w_head + b_head
    return logits, diag


def final_feature_map(cfg: ModelConfig, x: np.ndarray, token_ids: np.ndarray, sizes: np.ndarray) -> FeatureMap:
    return FeatureMap(tokens=Matrix(x), token_ids=token_ids, sizes=sizes)


# ---------------------------------------------------------------------------
# Config JSON I/O


def config_to_dict(cfg: ModelConfig) -> dict:
    d = {
        "image_size": cfg.image_size,
        "patch_size": cfg.patch_size,
        "embed_dim": cfg.embed_dim,
        "depth": cfg.depth,
        "heads": cfg.heads,
        "has_cls": cfg.has_cls,
        "mlp_ratio": cfg.mlp_ratio,
        "num_classes": cfg.num_classes,
        "gap_weighted": cfg.gap_weighted,
        "reduction": {
            "p_per_layer": cfg.reduction.p_per_layer,
            "alpha": cfg.reduction.alpha,
            "graph_kind": cfg.reduction.graph_kind.value,
            "theta": cfg.reduction.theta,
            "m_neighbors": cfg.reduction.m_neighbors,
            "aggregator": cfg.reduction.aggregator,
        },
    }
    return d


def config_from_dict(d: dict) -> ModelConfig:
    allowed = {
        "image_size", "patch_size", "embed_dim", "depth", "heads", "has_cls",
        "mlp_ratio", "num_classes", "gap_weighted", "reduction",
    }
    unknown = set(d) - allowed
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    rd = dict(d.get("reduction", {}))
    red_allowed = {"p_per_layer", "alpha", "graph_kind", "theta", "m_neighbors", "aggregator"}
    red_unknown = set(rd) - red_allowed
    if red_unknown:
        raise ConfigError(f"unknown reduction keys: {sorted(red_unknown)}")
    if "graph_kind" in rd:
        try:
            rd["graph_kind"] = GraphKind(rd["graph_kind"])
        except ValueError:
            raise ConfigError(f"unknown graph kind {rd['graph_kind']!r}") from None
    reduction = ReductionConfig(**rd)
    top = {k: v for k, v in d.items() if k != "reduction"}
    try:
        return ModelConfig(reduction=reduction, **top)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path) -> ModelConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return config_from_dict(json.load(fh))


def save_config(cfg: ModelConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(config_to_dict(cfg), fh, indent=2, sort_keys=True)
        fh.write("\n")


def with_reduction(cfg: ModelConfig, **changes) -> ModelConfig:
    """Copy of cfg with reduction fields replaced."""
    return replace(cfg, reduction=replace(cfg.reduction, **changes))
