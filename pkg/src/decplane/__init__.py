"""decplane: a CPU-side decision plane for LLM serving.

Turns vocabulary-major logits shards into next tokens with column-wise
penalties, truncation-first filtering, and speculative hot-vocab sampling,
plus the sizing model, transport layer, pipeline analytics, and validation
harness around them.
"""

from .core import (
    LogitsShardBlock,
    SamplingParams,
    SequenceState,
    TokenDecision,
    new_sequence_state,
    validate_params,
)
from .shvs import HotVocab, build_hot_vocab
from .service import Engine, EngineConfig, load_config

__version__ = "0.1.0"

__all__ = [
    "Engine",
    "EngineConfig",
    "HotVocab",
    "LogitsShardBlock",
    "SamplingParams",
    "SequenceState",
    "TokenDecision",
    "build_hot_vocab",
    "load_config",
    "new_sequence_state",
    "validate_params",
    "__version__",
]
