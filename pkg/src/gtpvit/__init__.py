"""Graph-based token propagation engine for ViT inference."""

from .attention import AttentionTensor, BlockWeights, mhsa_forward, sparsify_attention, update_sizes
from .complexity import (
    CostReport,
    backbone_macs,
    empirical_mac_count,
    overhead_gtp,
    overhead_gtp_summation,
    overhead_tome,
    overhead_tome_summation,
)
from .errors import (
    ArgumentError,
    ConfigError,
    DegenerateInputError,
    FormatError,
    GtpError,
    PartitionError,
    SchemaError,
    ShapeError,
    StrategyError,
)
from .graph import (
    GraphKind,
    PropagationView,
    RawAdjacency,
    TokenGraph,
    build_mixed,
    build_semantic,
    build_spatial,
    extract_propagation_view,
    normalize,
)
from .linalg import IndexSet, MacCounter, Matrix, argsort_desc, cosine_similarity, kth_largest, matmul, row_softmax
from .reduction import (
    ReductionConfig,
    ReductionPlan,
    Strategy,
    propagate,
    score_broadcasting,
    score_regeneration,
    select_tokens,
    select_tokens_baseline,
)
from .rng import SplitMix64, substream
from .runtime import (
    Diagnostics,
    FeatureMap,
    ModelConfig,
    WeightStore,
    forward,
    generate_fixture,
    load_config,
    load_weights,
    oversmoothing_metric,
    preset,
    preset_names,
    save_weights,
    with_reduction,
)

__version__ = "0.1.0"
