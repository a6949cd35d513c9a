"""Dual-model decoding engine: the base model generates by default and a
stronger guide model takes over for exactly one token at calibrated
disagreement spikes. Ships with the full token-level diagnostic suite
(sparsity, positional, alignment, enrichment, failure prediction) and a
synthetic fork-scenario harness."""

from .calibration import CalibrationStats, ScoreSample, calibrate, collect_scores
from .distributions import (
    LOG_FLOOR,
    MetricKind,
    TokenDistribution,
    Vocab,
    cross_entropy,
    disagreement_score,
    entropy,
    normalize_logits,
    reverse_kl,
)
from .gated_decoder import (
    GateConfig,
    RolloutTrace,
    StepRecord,
    audit_trace,
    base_only_decode,
    early_only_decode,
    entropy_gated_decode,
    gate,
    gated_decode,
    guide_only_decode,
    random_budget_decode,
    read_traces,
    realized_rate,
    trace_from_json,
    trace_to_json,
    write_traces,
)
from .models import (
    NgramModel,
    RemoteModel,
    SamplerConfig,
    TableModel,
    TokenSequence,
    ngram_fit,
    sample,
    table_model_load,
)

__version__ = "0.1.0"

__all__ = [
    "CalibrationStats",
    "GateConfig",
    "LOG_FLOOR",
    "MetricKind",
    "NgramModel",
    "RemoteModel",
    "RolloutTrace",
    "SamplerConfig",
    "ScoreSample",
    "StepRecord",
    "TableModel",
    "TokenDistribution",
    "TokenSequence",
    "Vocab",
    "audit_trace",
    "base_only_decode",
    "calibrate",
    "collect_scores",
    "cross_entropy",
    "disagreement_score",
    "early_only_decode",
    "entropy",
    "entropy_gated_decode",
    "gate",
    "gated_decode",
    "guide_only_decode",
    "normalize_logits",
    "ngram_fit",
    "random_budget_decode",
    "read_traces",
    "realized_rate",
    "reverse_kl",
    "sample",
    "table_model_load",
    "trace_from_json",
    "trace_to_json",
    "write_traces",
]
