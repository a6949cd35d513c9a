"""Token-level trace analyses: sparsity (Lorenz/Gini), positional structure,
disagreement-uncertainty overlap (IoU), planning/execution enrichment,
failure prediction (top-K mean + AUROC/accuracy), flip tallies, and budget
summaries.

All functions are pure over immutable traces; aggregation across traces is
per-sample-then-average.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache
from importlib import resources
from typing import Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

from .errors import (
    AllZeroError,
    EmptyTraceError,
    IdMismatchError,
    LengthMismatchError,
    NegativeScoreError,
    NoClassifiableTokensError,
    SingleClassError,
    ZeroGlobalShareError,
)
from .gated_decoder import RolloutTrace

DEFAULT_TOP_K = 100
DEFAULT_BINS = 50


# --- concentration ----------------------------------------------------------


@dataclass(frozen=True)
class LorenzCurve:
    """Points (x_k, y_k): fraction of tokens vs fraction of score mass they
    carry, over ascending-sorted scores."""

    points: tuple[tuple[float, float], ...]


def _checked_scores(scores) -> np.ndarray:
    arr = np.asarray(scores, dtype=np.float64)
    if arr.size == 0:
        raise EmptyTraceError("need at least one score")
    if np.any(arr < 0):
        raise NegativeScoreError("scores must be nonnegative")
    if float(arr.sum()) == 0.0:
        raise AllZeroError("total score mass is zero")
    return arr


def lorenz_curve(scores) -> LorenzCurve:
    arr = np.sort(_checked_scores(scores))
    n = arr.size
    cum = np.cumsum(arr) / arr.sum()
    xs = np.arange(1, n + 1) / n
    return LorenzCurve(points=tuple((float(x), float(y)) for x, y in zip(xs, cum)))


def gini(scores) -> float:
    """Discrete Gini of nonnegative scores: ``sum((2i - N - 1) s_(i)) / (N sum s)``
    over ascending-sorted scores; 0 for uniform mass, (N-1)/N for a point mass."""
    arr = np.sort(_checked_scores(scores))
    n = arr.size
    i = np.arange(1, n + 1, dtype=np.float64)
    return float(np.sum((2 * i - n - 1) * arr) / (n * arr.sum()))


# --- top-set selection -------------------------------------------------------


def _top_count(n: int, p: float) -> int:
    if not 0 < p <= 1:
        raise ValueError(f"top fraction p must lie in (0, 1], got {p}")
    k = math.ceil(p * n - 1e-9)
    return min(max(k, 1), n)


def _top_set(scores: Sequence[float], p: float) -> set[int]:
    """Indices of the ceil(p*N) largest scores; ties keep the earlier index."""
    n = len(scores)
    k = _top_count(n, p)
    order = sorted(range(n), key=lambda i: (-scores[i], i))
    return set(order[:k])


def top_fraction_positions(trace: RolloutTrace, p: float) -> list[float]:
    """Normalized positions u = t/T of the top-p fraction of steps by score."""
    if len(trace.steps) == 0:
        raise EmptyTraceError("trace has no steps")
    scores = [s.score for s in trace.steps]
    n = len(scores)
    return sorted((i + 1) / n for i in _top_set(scores, p))


@dataclass(frozen=True)
class PositionHistogram:
    """Density histogram over u in (0, 1]; integrates to 1."""

    edges: tuple[float, ...]
    density: tuple[float, ...]


def position_density(positions: Sequence[float], bins: int = DEFAULT_BINS) -> PositionHistogram:
    if bins < 2:
        raise ValueError("need at least 2 bins")
    if len(positions) == 0:
        raise EmptyTraceError("no positions to bin")
    density, edges = np.histogram(positions, bins=bins, range=(0.0, 1.0), density=True)
    return PositionHistogram(edges=tuple(map(float, edges)), density=tuple(map(float, density)))


def iou_topp(scores_a: Sequence[float], scores_b: Sequence[float], p: float) -> float:
    """Intersection-over-union of the two top-p index sets."""
    if len(scores_a) != len(scores_b):
        raise LengthMismatchError(
            f"score sequences differ in length: {len(scores_a)} vs {len(scores_b)}"
        )
    if len(scores_a) == 0:
        raise EmptyTraceError("empty score sequences")
    a = _top_set(scores_a, p)
    b = _top_set(scores_b, p)
    return len(a & b) / len(a | b)


# --- token classification ----------------------------------------------------


class TokenCategory(Enum):
    PLANNING = "planning"
    EXECUTION = "execution"
    UNCLASSIFIED = "unclassified"


_NUMBER_RE = re.compile(r"\d+(?:\.\d+)?")
_OPERATOR_RE = re.compile(r"[+\-*/=<>^]+")
_STRUCTURE_RE = re.compile(r"[${}()\[\]]+|\\[a-zA-Z]+")
_VARIABLE_RE = re.compile(r"[a-z]")


@lru_cache(maxsize=1)
def planning_vocabulary() -> frozenset[str]:
    """The frozen planning keyword list shipped with the package."""
    text = resources.files("forkdecode").joinpath("data/planning_vocab_v1.json").read_text()
    doc = json.loads(text)
    words: set[str] = set()
    for category_words in doc["categories"].values():
        words.update(category_words)
    return frozenset(words)


def classify_token(text: str) -> TokenCategory:
    """Planning keywords first, then execution patterns (numbers, operators,
    structural symbols, single-letter variables), else unclassified."""
    s = text.strip().lower()
    if not s:
        return TokenCategory.UNCLASSIFIED
    if s in planning_vocabulary():
        return TokenCategory.PLANNING
    if (
        _NUMBER_RE.fullmatch(s)
        or _OPERATOR_RE.fullmatch(s)
        or _STRUCTURE_RE.fullmatch(s)
        or _VARIABLE_RE.fullmatch(s)
    ):
        return TokenCategory.EXECUTION
    return TokenCategory.UNCLASSIFIED


@dataclass(frozen=True)
class EnrichmentRow:
    category: TokenCategory
    global_share: float
    target_share: float
    enrichment: float


def _classifiable_share(tokens: Sequence[str], category: TokenCategory) -> tuple[float, int]:
    cats = [classify_token(t) for t in tokens]
    classifiable = [c for c in cats if c is not TokenCategory.UNCLASSIFIED]
    if not classifiable:
        raise NoClassifiableTokensError("token stream has no planning/execution tokens")
    hits = sum(1 for c in classifiable if c is category)
    return hits / len(classifiable), len(classifiable)


def enrichment(
    reference_tokens: Sequence[str],
    target_tokens: Sequence[str],
    category: TokenCategory,
) -> EnrichmentRow:
    """Over-representation of ``category`` in the target stream relative to
    the reference stream, within classifiable tokens only."""
    global_share, _ = _classifiable_share(reference_tokens, category)
    target_share, _ = _classifiable_share(target_tokens, category)
    if global_share == 0.0:
        raise ZeroGlobalShareError(
            f"category {category.value!r} absent from the reference stream"
        )
    return EnrichmentRow(
        category=category,
        global_share=global_share,
        target_share=target_share,
        enrichment=target_share / global_share,
    )


# --- failure prediction -------------------------------------------------------


def failure_score(trace: RolloutTrace, k: int = DEFAULT_TOP_K) -> float:
    """Mean of the min(k, T) largest per-step scores in the trace."""
    if k < 1:
        raise ValueError("k must be >= 1")
    scores = np.sort([s.score for s in trace.steps])[::-1]
    return float(scores[: min(k, scores.size)].mean())


def auroc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Probability a positive (label 1) outscores a negative, ties at 0.5."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape:
        raise LengthMismatchError("scores and labels differ in length")
    n_pos = int(np.sum(y == 1))
    n_neg = int(np.sum(y == 0))
    if n_pos == 0 or n_neg == 0:
        raise SingleClassError("AUROC needs both a positive and a negative example")
    ranks = rankdata(s)
    u = float(np.sum(ranks[y == 1])) - n_pos * (n_pos + 1) / 2
    return u / (n_pos * n_neg)


def accuracy_at_threshold(
    scores: Sequence[float], labels: Sequence[int]
) -> tuple[float, float]:
    """Accuracy of "score >= threshold predicts failure", with the threshold
    chosen to maximize balanced accuracy on this same set. Ties prefer the
    smallest threshold; the chosen threshold is returned alongside."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape:
        raise LengthMismatchError("scores and labels differ in length")
    n_pos = int(np.sum(y == 1))
    n_neg = int(np.sum(y == 0))
    if n_pos == 0 or n_neg == 0:
        raise SingleClassError("threshold selection needs both classes")
    candidates = list(np.unique(s)) + [np.inf]
    best = (-1.0, math.inf)
    for thr in candidates:
        pred = s >= thr
        tpr = np.sum(pred & (y == 1)) / n_pos
        tnr = np.sum(~pred & (y == 0)) / n_neg
        balanced = (tpr + tnr) / 2
        if balanced > best[0] + 1e-15:
            best = (balanced, float(thr))
    thr = best[1]
    acc = float(np.mean((s >= thr) == (y == 1)))
    return acc, thr


# --- run-level tallies ---------------------------------------------------------


@dataclass(frozen=True)
class FlipStats:
    err_to_correct: int
    correct_to_err: int
    unchanged: int


def flip_stats(
    base_pass: Mapping[str, bool], guided_pass: Mapping[str, bool]
) -> FlipStats:
    """Per-problem pass/fail flips between two runs (aligned by problem id)."""
    if set(base_pass) != set(guided_pass):
        raise IdMismatchError("problem id sets differ between the two runs")
    e2c = c2e = same = 0
    for pid, before in base_pass.items():
        after = guided_pass[pid]
        if not before and after:
            e2c += 1
        elif before and not after:
            c2e += 1
        else:
            same += 1
    return FlipStats(err_to_correct=e2c, correct_to_err=c2e, unchanged=same)


@dataclass(frozen=True)
class BudgetSummary:
    mean_rho: float
    std_rho: float
    per_problem: tuple[tuple[str, int, float], ...]


def budget_summary(traces: Sequence[RolloutTrace]) -> BudgetSummary:
    """Realized intervention rate per trace plus mean/std over traces."""
    if len(traces) == 0:
        raise EmptyTraceError("no traces to summarize")
    rhos = np.array([t.realized_rate for t in traces], dtype=np.float64)
    return BudgetSummary(
        mean_rho=float(np.mean(rhos)),
        std_rho=float(np.std(rhos)),
        per_problem=tuple(
            (t.prompt_id, t.sample_index, float(t.realized_rate)) for t in traces
        ),
    )
