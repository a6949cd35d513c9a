"""Next-token distributions and the disagreement/uncertainty metrics.

Everything downstream (calibration, gating, diagnostics) consumes the
``TokenDistribution`` defined here: a full-vocabulary vector of natural-log
probabilities, normalized so ``logsumexp == 0`` and floored at ``LOG_FLOOR``
so no metric ever sees ``-inf``.

Scores are always computed on the raw (temperature-1) distributions;
sampling transforms live in :mod:`forkdecode.models` and never feed back
into any metric.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy.special import logsumexp

from .errors import LengthMismatchError, NonFiniteInputError, VocabMismatchError

# Floor (in nats) for any single log-probability. Keeps cross-entropy finite
# when one model assigns numerically-zero mass to a token the other supports.
LOG_FLOOR = -30.0

_NORM_TOL = 1e-6


@dataclass(frozen=True)
class Vocab:
    """Shared token id space; ids run over ``[0, size)``."""

    size: int

    def __post_init__(self) -> None:
        if self.size < 2:
            raise ValueError(f"vocab size must be >= 2, got {self.size}")


class MetricKind(str, Enum):
    """Which per-step score drives the gate."""

    CROSS_ENTROPY = "ce"
    REVERSE_KL = "rkl"
    BASE_ENTROPY = "entropy"

    @property
    def needs_guide(self) -> bool:
        return self is not MetricKind.BASE_ENTROPY


@dataclass(frozen=True)
class TokenDistribution:
    """Normalized log-probability vector over a shared vocabulary.

    Invariants: ``logsumexp(log_probs) == 0`` within 1e-6, every entry in
    ``[LOG_FLOOR, 0]``, no NaN/inf. Construct via :func:`normalize_logits`
    or :meth:`from_probs` rather than by hand.
    """

    log_probs: np.ndarray
    vocab: Vocab

    def __post_init__(self) -> None:
        lp = self.log_probs
        if lp.shape != (self.vocab.size,):
            raise LengthMismatchError(
                f"log_probs has shape {lp.shape}, vocab size is {self.vocab.size}"
            )
        if not np.all(np.isfinite(lp)):
            raise NonFiniteInputError("log_probs contains NaN or inf")
        if np.any(lp > 1e-12) or np.any(lp < LOG_FLOOR - 1e-12):
            raise ValueError("log_probs outside [LOG_FLOOR, 0]")
        total = float(logsumexp(lp))
        if abs(total) > _NORM_TOL:
            raise ValueError(f"log_probs not normalized: logsumexp = {total}")
        lp.flags.writeable = False

    @classmethod
    def from_probs(cls, probs, vocab: Vocab) -> "TokenDistribution":
        """Build from a probability vector; zero entries hit the floor."""
        p = np.asarray(probs, dtype=np.float64)
        if not np.all(np.isfinite(p)):
            raise NonFiniteInputError("probabilities contain NaN or inf")
        if np.any(p < 0):
            raise ValueError("probabilities must be nonnegative")
        return normalize_logits(np.log(np.maximum(p, np.exp(LOG_FLOOR))), vocab)

    def probs(self) -> np.ndarray:
        return np.exp(self.log_probs)


def normalize_logits(raw, vocab: Vocab) -> TokenDistribution:
    """Log-softmax ``raw``, clamp at ``LOG_FLOOR``, and re-normalize.

    The final clamp re-raises entries the renormalization shift pushed a
    hair below the floor; the residual mass error is far inside the 1e-6
    normalization tolerance.
    """
    arr = np.asarray(raw, dtype=np.float64)
    if arr.ndim != 1 or arr.shape[0] != vocab.size:
        raise LengthMismatchError(
            f"raw logits have shape {arr.shape}, vocab size is {vocab.size}"
        )
    if not np.all(np.isfinite(arr)):
        raise NonFiniteInputError("raw logits contain NaN or inf")
    lp = arr - logsumexp(arr)
    lp = np.maximum(lp, LOG_FLOOR)
    lp = lp - logsumexp(lp)
    lp = np.maximum(lp, LOG_FLOOR)
    return TokenDistribution(log_probs=lp, vocab=vocab)


def _check_pair(p: TokenDistribution, q: TokenDistribution) -> None:
    if p.vocab.size != q.vocab.size:
        raise VocabMismatchError(
            f"distributions over different vocabularies: {p.vocab.size} vs {q.vocab.size}"
        )


def cross_entropy(p_b: TokenDistribution, p_r: TokenDistribution) -> float:
    """Expected surprisal of ``p_r`` under ``p_b``: ``-sum p_b(y) log p_r(y)``."""
    _check_pair(p_b, p_r)
    return float(-np.dot(np.exp(p_b.log_probs), p_r.log_probs))


def entropy(p: TokenDistribution) -> float:
    """Shannon entropy in nats; ``0 <= H <= ln(vocab size)``."""
    return float(-np.dot(np.exp(p.log_probs), p.log_probs))


def reverse_kl(p_b: TokenDistribution, p_r: TokenDistribution) -> float:
    """``KL(p_b || p_r)``, equal to ``cross_entropy(p_b, p_r) - entropy(p_b)``."""
    _check_pair(p_b, p_r)
    return float(np.dot(np.exp(p_b.log_probs), p_b.log_probs - p_r.log_probs))


def disagreement_score(
    metric: MetricKind,
    p_b: TokenDistribution,
    p_r: TokenDistribution | None = None,
) -> float:
    """Per-step gating score under the chosen metric."""
    if metric is MetricKind.BASE_ENTROPY:
        return entropy(p_b)
    if p_r is None:
        raise ValueError(f"metric {metric.value!r} requires the guide distribution")
    if metric is MetricKind.CROSS_ENTROPY:
        return cross_entropy(p_b, p_r)
    return reverse_kl(p_b, p_r)
