"""Information-flow-aware visual token pruning on toy encoder traces."""

__version__ = "0.1.0"

from .encoder import EncoderConfig, build_encoder, encode, encode_step, drop_tokens, generate_trace
from .engine import (
    PruneConfig,
    PruneReport,
    baseline_single_layer,
    cumulative_update,
    global_attention,
    multi_criteria_score,
    prune_count,
    run_schedule,
    select_keep,
)
from .tensor import LayerTrace, TraceFile, read_trace, write_trace
