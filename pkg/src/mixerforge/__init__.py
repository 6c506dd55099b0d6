"""mixerforge: linear-attention token mixers, hybrid stacks, and cost models."""

from .mixers import (
    DECAY_KINDS,
    DELTA_KINDS,
    VECTOR_KINDS,
    Dimensions,
    GateSet,
    MixerKind,
    MixerState,
    TokenProjection,
    init_state,
    oracle_unrolled,
    scan,
    scan_chunked,
    step,
)
from .hybrid import FULL_TRANSFORMER, PURE_LINEAR, HybridConfig, build_schedule, cache_report, forward, init_model
from .costmodel import model_flops, pareto, per_token_flops

__all__ = [
    "DECAY_KINDS",
    "DELTA_KINDS",
    "VECTOR_KINDS",
    "Dimensions",
    "GateSet",
    "MixerKind",
    "MixerState",
    "TokenProjection",
    "init_state",
    "oracle_unrolled",
    "scan",
    "scan_chunked",
    "step",
    "FULL_TRANSFORMER",
    "PURE_LINEAR",
    "HybridConfig",
    "build_schedule",
    "cache_report",
    "forward",
    "init_model",
    "model_flops",
    "pareto",
    "per_token_flops",
]

__version__ = "0.1.0"
