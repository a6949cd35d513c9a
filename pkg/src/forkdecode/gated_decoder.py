"""Runtime gating and the decoder family.

The guided decoder follows the base model by default and hands exactly one
token to the guide whenever the disagreement score forms a calibrated
spike: ``s_t > tau`` (global tail event) and ``s_t > lambda * mean(recent
scores)`` (local spike test over a sliding window of size W). Step 1 never
fires because the window is empty.

Every decoder in the family emits the same provenance-tagged
:class:`RolloutTrace`; the comparison baselines (random-budget, early-only,
entropy-gated) differ only in the takeover rule.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .calibration import DEFAULT_WINDOW, CalibrationStats
from .distributions import MetricKind, cross_entropy, entropy, reverse_kl
from .errors import (
    EmptyTraceError,
    MetricMismatchError,
    MissingGuideLengthError,
    TraceAuditError,
)
from .models import Model, SamplerConfig, check_shared_vocab, sample

DECODER_KINDS = (
    "guided",
    "base_only",
    "random",
    "early_only",
    "entropy_gated",
    "guide_only",
)

BASE = "base"
GUIDE = "guide"


@dataclass(frozen=True)
class GateConfig:
    """Two-part spike gate parameters."""

    tau: float
    lam: float
    window: int = DEFAULT_WINDOW
    metric: MetricKind = MetricKind.CROSS_ENTROPY

    def __post_init__(self) -> None:
        if self.window < 1:
            raise ValueError("window must be >= 1")

    @classmethod
    def from_calibration(cls, stats: CalibrationStats) -> "GateConfig":
        return cls(tau=stats.tau, lam=stats.lam, window=stats.window, metric=stats.metric)


@dataclass(frozen=True)
class StepRecord:
    """One decoding step with its gate evidence and provenance."""

    t: int
    token: int
    score: float
    base_entropy: float
    window_mean: float | None
    gate: bool
    chosen_from: str
    text: str | None = None

    def __post_init__(self) -> None:
        if self.gate != (self.chosen_from == GUIDE):
            raise ValueError("gate bit and chosen_from disagree")
        if (self.window_mean is None) != (self.t == 1):
            raise ValueError("window_mean must be absent exactly at t=1")


@dataclass(frozen=True)
class DecoderParams:
    """Decoder configuration embedded in the trace so audits need no context."""

    metric: str | None = None
    window: int | None = None
    tau: float | None = None
    lam: float | None = None
    rho_target: float | None = None
    guide_len: int | None = None


@dataclass(frozen=True)
class RolloutTrace:
    """One complete sampled response with per-token records."""

    prompt_id: str
    sample_index: int
    decoder_kind: str
    terminated_by: str
    realized_rate: float
    steps: tuple[StepRecord, ...]
    decoder: DecoderParams = field(default_factory=DecoderParams)

    def __post_init__(self) -> None:
        if self.decoder_kind not in DECODER_KINDS:
            raise ValueError(f"unknown decoder_kind {self.decoder_kind!r}")
        if self.terminated_by not in ("eos", "max_len"):
            raise ValueError(f"unknown terminated_by {self.terminated_by!r}")
        if len(self.steps) < 1:
            raise EmptyTraceError("a trace must contain at least one step")

    @property
    def tokens(self) -> list[int]:
        return [s.token for s in self.steps]


def window_mean(recent_scores: Sequence[float], window: int) -> float | None:
    """Mean of the most recent ``min(len, window)`` scores; None when empty."""
    if not recent_scores:
        return None
    recent = recent_scores[:window]
    return sum(recent) / len(recent)


def gate(s_t: float, cfg: GateConfig, recent_scores: Sequence[float]) -> bool:
    """Eq-style two-part test; ``recent_scores`` is most-recent-first.

    Returns True iff the window is nonempty (t > 1), ``s_t > tau``, and
    ``s_t`` exceeds ``lambda`` times the sliding-window mean.
    """
    wm = window_mean(recent_scores, cfg.window)
    if wm is None:
        return False
    return s_t > cfg.tau and s_t > cfg.lam * wm


def realized_rate(trace: RolloutTrace) -> float:
    """Fraction of emitted tokens produced under takeover."""
    return sum(1 for s in trace.steps if s.gate) / len(trace.steps)


def _score_fn(metric: MetricKind):
    if metric is MetricKind.CROSS_ENTROPY:
        return lambda p_b, p_r: cross_entropy(p_b, p_r)
    if metric is MetricKind.REVERSE_KL:
        return lambda p_b, p_r: reverse_kl(p_b, p_r)
    return lambda p_b, p_r: entropy(p_b)


def _decode_loop(
    model_b: Model,
    model_r: Model | None,
    prompt: Sequence[int],
    sampler_cfg: SamplerConfig,
    rng: np.random.Generator,
    *,
    kind: str,
    metric: MetricKind,
    window: int,
    decide: Callable[[int, float, float | None], bool],
    params: DecoderParams,
    prompt_id: str,
    sample_index: int,
    token_text: Callable[[int], str] | None = None,
) -> RolloutTrace:
    if model_r is not None:
        check_shared_vocab(model_b, model_r)
    elif metric.needs_guide:
        raise ValueError(f"metric {metric.value!r} requires a guide model")
    score_of = _score_fn(metric)

    ctx = list(prompt)
    history: list[float] = []
    steps: list[StepRecord] = []
    terminated_by = "max_len"
    for t in range(1, sampler_cfg.max_len + 1):
        p_b = model_b.next_distribution(ctx)
        h_b = entropy(p_b)
        p_r = model_r.next_distribution(ctx) if metric.needs_guide else None
        s_t = score_of(p_b, p_r)
        recent = history[::-1]
        wm = window_mean(recent, window)
        g = decide(t, s_t, wm)
        if g:
            if model_r is None:
                raise ValueError("takeover decided but no guide model was supplied")
            if p_r is None:
                p_r = model_r.next_distribution(ctx)
            dist = p_r
        else:
            dist = p_b
        token = sample(dist, sampler_cfg, rng)
        steps.append(
            StepRecord(
                t=t,
                token=token,
                score=s_t,
                base_entropy=h_b,
                window_mean=wm,
                gate=g,
                chosen_from=GUIDE if g else BASE,
                text=token_text(token) if token_text else None,
            )
        )
        ctx.append(token)
        history.append(s_t)
        if len(history) > window:
            del history[0]
        if sampler_cfg.eos_id is not None and token == sampler_cfg.eos_id:
            terminated_by = "eos"
            break
    steps_t = tuple(steps)
    return RolloutTrace(
        prompt_id=prompt_id,
        sample_index=sample_index,
        decoder_kind=kind,
        terminated_by=terminated_by,
        realized_rate=sum(1 for s in steps_t if s.gate) / len(steps_t),
        steps=steps_t,
        decoder=params,
    )


def gated_decode(
    model_b: Model,
    model_r: Model,
    prompt: Sequence[int],
    gate_cfg: GateConfig,
    sampler_cfg: SamplerConfig,
    rng: np.random.Generator,
    *,
    prompt_id: str = "",
    sample_index: int = 0,
    token_text: Callable[[int], str] | None = None,
) -> RolloutTrace:
    """Disagreement-gated decoding with one-token takeovers."""

    def decide(t: int, s_t: float, wm: float | None) -> bool:
        if wm is None:
            return False
        return s_t > gate_cfg.tau and s_t > gate_cfg.lam * wm

    return _decode_loop(
        model_b,
        model_r,
        prompt,
        sampler_cfg,
        rng,
        kind="guided",
        metric=gate_cfg.metric,
        window=gate_cfg.window,
        decide=decide,
        params=DecoderParams(
            metric=gate_cfg.metric.value,
            window=gate_cfg.window,
            tau=float(gate_cfg.tau),
            lam=float(gate_cfg.lam),
        ),
        prompt_id=prompt_id,
        sample_index=sample_index,
        token_text=token_text,
    )


def entropy_gated_decode(
    model_b: Model,
    model_r: Model,
    prompt: Sequence[int],
    gate_cfg: GateConfig,
    sampler_cfg: SamplerConfig,
    rng: np.random.Generator,
    *,
    prompt_id: str = "",
    sample_index: int = 0,
    token_text: Callable[[int], str] | None = None,
) -> RolloutTrace:
    """Gate on the base model's entropy alone; the guide is queried only on
    takeover steps, which is the whole efficiency point of this variant."""
    if gate_cfg.metric is not MetricKind.BASE_ENTROPY:
        raise MetricMismatchError(
            f"entropy-gated decoding needs calibration with metric "
            f"{MetricKind.BASE_ENTROPY.value!r}, got {gate_cfg.metric.value!r}"
        )

    def decide(t: int, s_t: float, wm: float | None) -> bool:
        if wm is None:
            return False
        return s_t > gate_cfg.tau and s_t > gate_cfg.lam * wm

    return _decode_loop(
        model_b,
        model_r,
        prompt,
        sampler_cfg,
        rng,
        kind="entropy_gated",
        metric=MetricKind.BASE_ENTROPY,
        window=gate_cfg.window,
        decide=decide,
        params=DecoderParams(
            metric=MetricKind.BASE_ENTROPY.value,
            window=gate_cfg.window,
            tau=float(gate_cfg.tau),
            lam=float(gate_cfg.lam),
        ),
        prompt_id=prompt_id,
        sample_index=sample_index,
        token_text=token_text,
    )


def base_only_decode(
    model_b: Model,
    model_r: Model | None,
    prompt: Sequence[int],
    sampler_cfg: SamplerConfig,
    rng: np.random.Generator,
    *,
    metric: MetricKind = MetricKind.CROSS_ENTROPY,
    window: int = DEFAULT_WINDOW,
    prompt_id: str = "",
    sample_index: int = 0,
    token_text: Callable[[int], str] | None = None,
) -> RolloutTrace:
    """Pure base rollout; the guide (if given) is queried only for scores."""
    if model_r is None:
        metric = MetricKind.BASE_ENTROPY
    return _decode_loop(
        model_b,
        model_r,
        prompt,
        sampler_cfg,
        rng,
        kind="base_only",
        metric=metric,
        window=window,
        decide=lambda t, s, wm: False,
        params=DecoderParams(metric=metric.value, window=window),
        prompt_id=prompt_id,
        sample_index=sample_index,
        token_text=token_text,
    )


def guide_only_decode(
    model_b: Model,
    model_r: Model,
    prompt: Sequence[int],
    sampler_cfg: SamplerConfig,
    rng: np.random.Generator,
    *,
    metric: MetricKind = MetricKind.CROSS_ENTROPY,
    window: int = DEFAULT_WINDOW,
    prompt_id: str = "",
    sample_index: int = 0,
    token_text: Callable[[int], str] | None = None,
) -> RolloutTrace:
    """Every token sampled from the guide (the strong-model reference)."""
    return _decode_loop(
        model_b,
        model_r,
        prompt,
        sampler_cfg,
        rng,
        kind="guide_only",
        metric=metric,
        window=window,
        decide=lambda t, s, wm: True,
        params=DecoderParams(metric=metric.value, window=window),
        prompt_id=prompt_id,
        sample_index=sample_index,
        token_text=token_text,
    )


def random_budget_decode(
    model_b: Model,
    model_r: Model,
    prompt: Sequence[int],
    rho_target: float,
    sampler_cfg: SamplerConfig,
    rng: np.random.Generator,
    *,
    metric: MetricKind = MetricKind.CROSS_ENTROPY,
    window: int = DEFAULT_WINDOW,
    prompt_id: str = "",
    sample_index: int = 0,
    token_text: Callable[[int], str] | None = None,
) -> RolloutTrace:
    """Matched-budget baseline: each step independently delegates to the
    guide with probability ``rho_target``.

    At 0 and 1 no gating draw is consumed, so those settings are
    token-identical to base-only / guide-only under the same rng.
    """
    if not 0 <= rho_target <= 1:
        raise ValueError("rho_target must lie in [0, 1]")

    def decide(t: int, s: float, wm: float | None) -> bool:
        if rho_target <= 0.0:
            return False
        if rho_target >= 1.0:
            return True
        return bool(rng.random() < rho_target)

    return _decode_loop(
        model_b,
        model_r,
        prompt,
        sampler_cfg,
        rng,
        kind="random",
        metric=metric,
        window=window,
        decide=decide,
        params=DecoderParams(
            metric=metric.value, window=window, rho_target=float(rho_target)
        ),
        prompt_id=prompt_id,
        sample_index=sample_index,
        token_text=token_text,
    )


def early_only_decode(
    model_b: Model,
    model_r: Model,
    prompt: Sequence[int],
    rho_target: float,
    guide_len: int | None,
    sampler_cfg: SamplerConfig,
    rng: np.random.Generator,
    *,
    metric: MetricKind = MetricKind.CROSS_ENTROPY,
    window: int = DEFAULT_WINDOW,
    prompt_id: str = "",
    sample_index: int = 0,
    token_text: Callable[[int], str] | None = None,
) -> RolloutTrace:
    """Matched-budget baseline: the guide produces the first
    ``floor(rho_target * guide_len)`` tokens, then the base continues."""
    if guide_len is None or guide_len < 1:
        raise MissingGuideLengthError(
            "early-only decoding needs the guide rollout length for this prompt"
        )
    if not 0 <= rho_target <= 1:
        raise ValueError("rho_target must lie in [0, 1]")
    cutoff = math.floor(rho_target * guide_len)
    return _decode_loop(
        model_b,
        model_r,
        prompt,
        sampler_cfg,
        rng,
        kind="early_only",
        metric=metric,
        window=window,
        decide=lambda t, s, wm: t <= cutoff,
        params=DecoderParams(
            metric=metric.value,
            window=window,
            rho_target=float(rho_target),
            guide_len=int(guide_len),
        ),
        prompt_id=prompt_id,
        sample_index=sample_index,
        token_text=token_text,
    )


# --- trace serialization ---------------------------------------------------
#
# JSONL, one trace per line. Floats use repr round-trip precision; key order
# is fixed by construction so serialize -> parse -> serialize is
# byte-identical.


def trace_to_dict(trace: RolloutTrace) -> dict:
    return {
        "prompt_id": trace.prompt_id,
        "sample_index": trace.sample_index,
        "decoder_kind": trace.decoder_kind,
        "terminated_by": trace.terminated_by,
        "realized_rate": float(trace.realized_rate),
        "decoder": {
            "metric": trace.decoder.metric,
            "window": trace.decoder.window,
            "tau": trace.decoder.tau,
            "lambda": trace.decoder.lam,
            "rho_target": trace.decoder.rho_target,
            "guide_len": trace.decoder.guide_len,
        },
        "steps": [
            {
                "t": s.t,
                "token": s.token,
                "score": float(s.score),
                "base_entropy": float(s.base_entropy),
                "window_mean": None if s.window_mean is None else float(s.window_mean),
                "gate": s.gate,
                "chosen_from": s.chosen_from,
                "text": s.text,
            }
            for s in trace.steps
        ],
    }


def trace_from_dict(doc: dict) -> RolloutTrace:
    dec = doc.get("decoder", {})
    return RolloutTrace(
        prompt_id=str(doc["prompt_id"]),
        sample_index=int(doc["sample_index"]),
        decoder_kind=str(doc["decoder_kind"]),
        terminated_by=str(doc["terminated_by"]),
        realized_rate=float(doc["realized_rate"]),
        decoder=DecoderParams(
            metric=dec.get("metric"),
            window=dec.get("window"),
            tau=dec.get("tau"),
            lam=dec.get("lambda"),
            rho_target=dec.get("rho_target"),
            guide_len=dec.get("guide_len"),
        ),
        steps=tuple(
            StepRecord(
                t=int(s["t"]),
                token=int(s["token"]),
                score=float(s["score"]),
                base_entropy=float(s["base_entropy"]),
                window_mean=None if s["window_mean"] is None else float(s["window_mean"]),
                gate=bool(s["gate"]),
                chosen_from=str(s["chosen_from"]),
                text=s["text"],
            )
            for s in doc["steps"]
        ),
    )


def trace_to_json(trace: RolloutTrace) -> str:
    return json.dumps(trace_to_dict(trace), separators=(",", ":"))


def trace_from_json(line: str) -> RolloutTrace:
    return trace_from_dict(json.loads(line))


def write_traces(path: str | Path, traces: Iterable[RolloutTrace]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for trace in traces:
            fh.write(trace_to_json(trace) + "\n")


def read_traces(path: str | Path) -> list[RolloutTrace]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(trace_from_json(line))
    return out


# --- trace auditing ---------------------------------------------------------


def audit_trace(trace: RolloutTrace) -> list[str]:
    """Re-derive everything derivable from the stored fields.

    Checks step numbering, window-mean recomputation (1e-12), gate/provenance
    consistency, exact realized-rate recomputation, and (for deterministic
    decoder kinds) the gate bit itself. Returns a list of problems, empty if
    the trace is internally consistent.
    """
    problems: list[str] = []
    d = trace.decoder
    scores = [s.score for s in trace.steps]
    for i, step in enumerate(trace.steps):
        where = f"step {i + 1}"
        if step.t != i + 1:
            problems.append(f"{where}: t={step.t}, expected {i + 1}")
        if not (math.isfinite(step.score) and math.isfinite(step.base_entropy)):
            problems.append(f"{where}: non-finite score fields")
        if step.gate != (step.chosen_from == GUIDE):
            problems.append(f"{where}: gate/chosen_from inconsistent")
        if d.window is not None:
            recent = scores[max(0, i - d.window):i][::-1]
            expected_wm = window_mean(recent, d.window)
            if expected_wm is None or step.window_mean is None:
                if expected_wm != step.window_mean:
                    problems.append(f"{where}: window_mean presence mismatch")
            elif abs(expected_wm - step.window_mean) > 1e-12:
                problems.append(
                    f"{where}: window_mean {step.window_mean} != recomputed {expected_wm}"
                )
        expected_gate = _expected_gate(trace, step)
        if expected_gate is not None and step.gate != expected_gate:
            problems.append(f"{where}: gate bit {step.gate}, expected {expected_gate}")
    rate = sum(1 for s in trace.steps if s.gate) / len(trace.steps)
    if rate != trace.realized_rate:
        problems.append(f"realized_rate {trace.realized_rate} != recomputed {rate}")
    if not 0.0 <= trace.realized_rate <= 1.0:
        problems.append(f"realized_rate {trace.realized_rate} outside [0, 1]")
    return problems


def _expected_gate(trace: RolloutTrace, step: StepRecord) -> bool | None:
    d = trace.decoder
    kind = trace.decoder_kind
    if kind == "base_only":
        return False
    if kind == "guide_only":
        return True
    if kind in ("guided", "entropy_gated"):
        if d.tau is None or d.lam is None:
            return None
        if step.window_mean is None:
            return False
        return step.score > d.tau and step.score > d.lam * step.window_mean
    if kind == "early_only":
        if d.rho_target is None or d.guide_len is None:
            return None
        return step.t <= math.floor(d.rho_target * d.guide_len)
    return None  # random: the bit is a coin flip, only consistency is checkable


def assert_trace_valid(trace: RolloutTrace) -> None:
    problems = audit_trace(trace)
    if problems:
        raise TraceAuditError("; ".join(problems))
