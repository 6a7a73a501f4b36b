"""Stateless intra-batch prefix deduplication for packed transformer batches.

Builds a prefix trie over a ragged batch, emits gather/scatter compaction
plans, applies them in a CPU reference transformer to prove forward and
backward equivalence, and predicts speedups analytically.
"""

from .cost import (
    CostInputs,
    SpeedupPrediction,
    compression_ratio,
    crossover_prefix,
    positionwise_fraction,
    predicted_speedup,
)
from .model import (
    FlopLedger,
    ModelConfig,
    apply_rope,
    attention_ragged,
    forward,
    init_params,
    load_checkpoint,
    loss_and_grads,
    rmsnorm,
    save_checkpoint,
    swiglu_mlp,
)
from .ops import gather_rows, gather_rows_backward, scatter_rows, scatter_rows_backward
from .ragged import (
    BatchStats,
    RaggedBatch,
    batch_from_json,
    batch_to_json,
    default_positions,
    load_batch,
    save_batch,
    validate_batch,
)
from .trie import (
    CompactionPlan,
    build_plan,
    build_plan_auto,
    build_plan_fast_paths,
    load_plan,
    pad_plan,
    plan_from_bytes,
    plan_to_bytes,
    save_plan,
    should_enable,
)

__version__ = "0.1.0"

__all__ = [
    "BatchStats",
    "CompactionPlan",
    "CostInputs",
    "FlopLedger",
    "ModelConfig",
    "RaggedBatch",
    "SpeedupPrediction",
    "apply_rope",
    "attention_ragged",
    "batch_from_json",
    "batch_to_json",
    "build_plan",
    "build_plan_auto",
    "build_plan_fast_paths",
    "compression_ratio",
    "crossover_prefix",
    "default_positions",
    "forward",
    "gather_rows",
    "gather_rows_backward",
    "init_params",
    "load_batch",
    "load_checkpoint",
    "load_plan",
    "loss_and_grads",
    "pad_plan",
    "plan_from_bytes",
    "plan_to_bytes",
    "positionwise_fraction",
    "predicted_speedup",
    "rmsnorm",
    "save_batch",
    "save_checkpoint",
    "save_plan",
    "scatter_rows",
    "scatter_rows_backward",
    "should_enable",
    "swiglu_mlp",
    "validate_batch",
]
