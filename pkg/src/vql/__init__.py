"""Key-only vector-quantized attention with length-free cached inference."""

__version__ = "0.1.0"

from .attention import (  # noqa: E402
    AttentionInputs,
    GvqConfig,
    TemporalConfig,
    error_bound_report,
    gvq_attention,
    infer_attention,
    one_hot_extraction_check,
    oracle_attention,
    temporal_infer,
    temporal_oracle,
    train_attention,
)
from .cache import (  # noqa: E402
    AssignmentCSC,
    CacheBundle,
    LightCache,
    build_assignment_csc,
    build_heavy_cache,
    build_light_cache,
    deserialize_cache,
    serialize_cache,
    update_heavy_cache_incremental,
)
from .vq import Assignment, Codebook, assign_nearest, quantize, update_codebook, vq_loss  # noqa: E402

__all__ = [
    "AttentionInputs", "GvqConfig", "TemporalConfig", "error_bound_report", "gvq_attention",
    "infer_attention", "one_hot_extraction_check", "oracle_attention", "temporal_infer",
    "temporal_oracle", "train_attention", "AssignmentCSC", "CacheBundle", "LightCache",
    "build_assignment_csc", "build_heavy_cache", "build_light_cache", "deserialize_cache",
    "serialize_cache", "update_heavy_cache_incremental", "Assignment", "Codebook",
    "assign_nearest", "quantize", "update_codebook", "vq_loss",
]
