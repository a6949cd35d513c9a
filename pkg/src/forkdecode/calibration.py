"""Offline gate calibration: pool per-token scores from base rollouts on a
held-out prompt set, then derive the global threshold tau (nearest-rank
quantile) and the tail-to-mean factor lambda.

Conventions pinned here: tau is the nearest-rank (1-r)-quantile (ascending
sort, 1-based index ceil((1-r)*N)); the tail is strict (s > tau). If no
score strictly exceeds tau, calibration fails loudly rather than fabricating
a lambda.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .distributions import MetricKind, disagreement_score, entropy
from .errors import EmptyPromptSetError, EmptyTailError
from .models import Model, SamplerConfig, check_shared_vocab, sample

DEFAULT_WINDOW = 64


@dataclass(frozen=True)
class ScoreSample:
    """Per-token scores pooled over all calibration rollouts."""

    scores: np.ndarray
    metric: MetricKind
    n_rollouts: int

    def __post_init__(self) -> None:
        arr = np.asarray(self.scores, dtype=np.float64)
        if arr.size == 0:
            raise ValueError("score sample is empty")
        if not np.all(np.isfinite(arr)):
            raise ValueError("score sample contains non-finite values")
        object.__setattr__(self, "scores", arr)


@dataclass(frozen=True)
class CalibrationStats:
    """Calibrated gate parameters for a target spike ratio r."""

    tau: float
    lam: float
    r: float
    metric: MetricKind
    sample_size: int
    window: int = DEFAULT_WINDOW


def calibrate(sample: ScoreSample, r: float) -> CalibrationStats:
    """Derive (tau, lambda) from a pooled score sample.

    tau = nearest-rank (1-r)-quantile; lambda = mean of the strict tail
    {s : s > tau} divided by the global mean.
    """
    if not 0 < r < 1:
        raise ValueError(f"spike ratio r must lie in (0, 1), got {r}")
    scores = np.sort(sample.scores)
    n = scores.size
    rank = math.ceil((1.0 - r) * n)
    rank = min(max(rank, 1), n)
    tau = float(scores[rank - 1])
    tail = scores[scores > tau]
    if tail.size == 0:
        raise EmptyTailError(
            f"no score strictly exceeds tau={tau}; cannot form the tail mean"
        )
    lam = float(tail.mean() / scores.mean())
    return CalibrationStats(
        tau=tau,
        lam=lam,
        r=r,
        metric=sample.metric,
        sample_size=n,
    )


def collect_scores(
    model_b: Model,
    model_r: Model | None,
    prompts: Sequence[Sequence[int]],
    sampler_cfg: SamplerConfig,
    metric: MetricKind,
    rngs: Sequence[np.random.Generator] | None = None,
) -> ScoreSample:
    """Run a pure base rollout per prompt and pool the per-token scores.

    The guide model is queried only for scoring; every emitted token is
    sampled from the base model. ``rngs`` supplies one generator per prompt
    (defaults to streams spawned from ``sampler_cfg.seed``).
    """
    if len(prompts) == 0:
        raise EmptyPromptSetError("calibration needs at least one prompt")
    if metric.needs_guide:
        if model_r is None:
            raise ValueError(f"metric {metric.value!r} requires a guide model")
        check_shared_vocab(model_b, model_r)
    if rngs is None:
        seeds = np.random.SeedSequence(sampler_cfg.seed).spawn(len(prompts))
        rngs = [np.random.default_rng(s) for s in seeds]
    if len(rngs) != len(prompts):
        raise ValueError("need exactly one rng per prompt")

    pooled: list[float] = []
    for prompt, rng in zip(prompts, rngs):
        ctx = list(prompt)
        for _ in range(sampler_cfg.max_len):
            p_b = model_b.next_distribution(ctx)
            if metric.needs_guide:
                p_r = model_r.next_distribution(ctx)
                pooled.append(disagreement_score(metric, p_b, p_r))
            else:
                pooled.append(entropy(p_b))
            token = sample(p_b, sampler_cfg, rng)
            ctx.append(token)
            if sampler_cfg.eos_id is not None and token == sampler_cfg.eos_id:
                break
    return ScoreSample(
        scores=np.asarray(pooled, dtype=np.float64),
        metric=metric,
        n_rollouts=len(prompts),
    )


def save_calibration(stats: CalibrationStats, path: str | Path) -> None:
    doc = {
        "metric": stats.metric.value,
        "r": stats.r,
        "tau": stats.tau,
        "lambda": stats.lam,
        "sample_size": stats.sample_size,
        "window": stats.window,
    }
    Path(path).write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")


def load_calibration(path: str | Path) -> CalibrationStats:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    return CalibrationStats(
        tau=float(doc["tau"]),
        lam=float(doc["lambda"]),
        r=float(doc["r"]),
        metric=MetricKind(doc["metric"]),
        sample_size=int(doc["sample_size"]),
        window=int(doc.get("window", DEFAULT_WINDOW)),
    )
