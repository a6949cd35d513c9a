"""Next-token model backends (table / n-gram / remote) and the sampler.

All backends expose ``next_distribution(ctx) -> TokenDistribution`` and are
deterministic: two calls on the same context return the same vector.
Every bit of randomness lives in :func:`sample`, which draws from an
explicit ``numpy.random.Generator``.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
import requests

from .distributions import TokenDistribution, Vocab, normalize_logits
from .errors import (
    EmptyCorpusError,
    ParseError,
    ProtocolError,
    RemoteUnavailableError,
    UnknownContextError,
    VocabMismatchError,
)

DEFAULT_TEMPERATURE = 0.6
DEFAULT_TOP_P = 0.95


@dataclass(frozen=True)
class TokenSequence:
    """A prompt plus the tokens generated so far."""

    tokens: tuple[int, ...]
    prompt_len: int

    def __post_init__(self) -> None:
        if not 0 <= self.prompt_len <= len(self.tokens):
            raise ValueError("prompt_len out of range")

    @property
    def generated(self) -> tuple[int, ...]:
        return self.tokens[self.prompt_len:]


@dataclass(frozen=True)
class SamplerConfig:
    """Decoding configuration: temperature + nucleus truncation + limits."""

    temperature: float = DEFAULT_TEMPERATURE
    top_p: float = DEFAULT_TOP_P
    seed: int = 0
    max_len: int = 16384
    eos_id: int | None = None

    def __post_init__(self) -> None:
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if not 0 < self.top_p <= 1:
            raise ValueError("top_p must lie in (0, 1]")
        if self.max_len < 1:
            raise ValueError("max_len must be positive")


class Model(Protocol):
    """Uniform next-token interface shared by all backends."""

    name: str
    vocab: Vocab

    def next_distribution(self, ctx: Sequence[int]) -> TokenDistribution: ...


def check_shared_vocab(model_b: Model, model_r: Model) -> Vocab:
    """Paired models must report the identical vocabulary size."""
    if model_b.vocab.size != model_r.vocab.size:
        raise VocabMismatchError(
            f"models disagree on vocab size: {model_b.name}={model_b.vocab.size}, "
            f"{model_r.name}={model_r.vocab.size}"
        )
    return model_b.vocab


def _validate_ctx(ctx: Sequence[int], vocab: Vocab) -> None:
    if len(ctx) == 0:
        raise ValueError("context must be nonempty")
    for t in ctx:
        if not 0 <= t < vocab.size:
            raise ValueError(f"token id {t} out of range for vocab size {vocab.size}")


class TableModel:
    """Explicit conditional table with longest-suffix context matching.

    ``rows`` maps a context suffix (tuple of token ids) to a probability
    vector; the optional default row (key ``()``) answers any context no
    stored suffix matches.
    """

    def __init__(
        self,
        vocab: Vocab,
        rows: dict[tuple[int, ...], np.ndarray],
        default: np.ndarray | None = None,
        name: str = "table",
    ) -> None:
        self.vocab = vocab
        self.name = name
        self._rows: dict[tuple[int, ...], TokenDistribution] = {}
        self._raw_rows: dict[tuple[int, ...], np.ndarray] = {}
        for key, probs in rows.items():
            self._store(tuple(key), probs)
        self._default: TokenDistribution | None = None
        self._raw_default: np.ndarray | None = None
        if default is not None:
            self._raw_default = np.asarray(default, dtype=np.float64)
            self._default = TokenDistribution.from_probs(self._raw_default, vocab)
        self._max_suffix = max((len(k) for k in self._rows), default=0)

    def _store(self, key: tuple[int, ...], probs) -> None:
        arr = np.asarray(probs, dtype=np.float64)
        self._raw_rows[key] = arr
        self._rows[key] = TokenDistribution.from_probs(arr, self.vocab)

    def next_distribution(self, ctx: Sequence[int]) -> TokenDistribution:
        _validate_ctx(ctx, self.vocab)
        ctx = tuple(ctx)
        for k in range(min(len(ctx), self._max_suffix), 0, -1):
            row = self._rows.get(ctx[-k:])
            if row is not None:
                return row
        if self._default is not None:
            return self._default
        raise UnknownContextError(
            f"no row matches context suffix {ctx[-self._max_suffix:]} and no default row"
        )

    def save(self, path: str | Path) -> None:
        write_table_file(path, self.vocab.size, self._raw_rows, self._raw_default)


def write_table_file(
    path: str | Path,
    vocab_size: int,
    rows: dict[tuple[int, ...], np.ndarray],
    default: np.ndarray | None,
) -> None:
    """Emit the line-oriented table format with full float precision."""
    lines = [f"vocab {vocab_size}"]
    for key in sorted(rows):
        ids = " ".join(str(t) for t in key)
        probs = " ".join(repr(float(p)) for p in rows[key])
        lines.append(f"row {ids} : {probs}")
    if default is not None:
        probs = " ".join(repr(float(p)) for p in default)
        lines.append(f"row * : {probs}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def table_model_load(path: str | Path, name: str | None = None) -> TableModel:
    """Parse a table model file.

    Format: header ``vocab <size>``, then ``row <ids|*> : <probs>`` lines.
    Probabilities in each row must sum to 1 within 1e-6. Blank lines and
    ``#`` comments are ignored.
    """
    path = Path(path)
    lines = [
        ln.strip()
        for ln in path.read_text(encoding="utf-8").splitlines()
        if ln.strip() and not ln.strip().startswith("#")
    ]
    if not lines:
        raise ParseError(f"{path}: empty table file")
    header = lines[0].split()
    if len(header) != 2 or header[0] != "vocab":
        raise ParseError(f"{path}: first line must be 'vocab <size>', got {lines[0]!r}")
    try:
        vocab_size = int(header[1])
    except ValueError as exc:
        raise ParseError(f"{path}: bad vocab size {header[1]!r}") from exc
    if vocab_size < 2:
        raise ParseError(f"{path}: vocab size must be >= 2")
    vocab = Vocab(vocab_size)

    rows: dict[tuple[int, ...], np.ndarray] = {}
    default: np.ndarray | None = None
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.startswith("row "):
            raise ParseError(f"{path}:{lineno}: expected 'row ...', got {line!r}")
        body = line[4:]
        if ":" not in body:
            raise ParseError(f"{path}:{lineno}: missing ':' separator")
        ctx_part, _, prob_part = body.partition(":")
        prob_strs = prob_part.split()
        if len(prob_strs) != vocab_size:
            raise ParseError(
                f"{path}:{lineno}: expected {vocab_size} probabilities, got {len(prob_strs)}"
            )
        try:
            probs = np.array([float(s) for s in prob_strs], dtype=np.float64)
        except ValueError as exc:
            raise ParseError(f"{path}:{lineno}: bad probability value") from exc
        if np.any(probs < 0) or not np.all(np.isfinite(probs)):
            raise ParseError(f"{path}:{lineno}: probabilities must be finite and >= 0")
        if abs(float(probs.sum()) - 1.0) > 1e-6:
            raise ParseError(
                f"{path}:{lineno}: probabilities sum to {probs.sum()}, expected 1"
            )
        ctx_strs = ctx_part.split()
        if ctx_strs == ["*"]:
            default = probs
            continue
        try:
            key = tuple(int(s) for s in ctx_strs)
        except ValueError as exc:
            raise ParseError(f"{path}:{lineno}: bad context token id") from exc
        if not key:
            raise ParseError(f"{path}:{lineno}: empty context (use '*' for the default row)")
        if any(not 0 <= t < vocab_size for t in key):
            raise ParseError(f"{path}:{lineno}: context token id out of range")
        rows[key] = probs
    if not rows and default is None:
        raise ParseError(f"{path}: table declares no rows")
    return TableModel(vocab, rows, default, name=name or path.stem)


class NgramModel:
    """Order-``n`` model with additive (add-alpha) smoothing.

    ``P(y | ctx) = (count(ctx, y) + alpha) / (count(ctx) + alpha * V)`` with
    ``ctx`` the last ``n - 1`` tokens. Unseen contexts fall back to the
    uniform smoothed estimate.
    """

    def __init__(self, n: int, alpha: float, vocab: Vocab, name: str = "ngram") -> None:
        if n < 1:
            raise ValueError("ngram order must be >= 1")
        if alpha <= 0:
            raise ValueError("smoothing alpha must be > 0")
        self.n = n
        self.alpha = alpha
        self.vocab = vocab
        self.name = name
        self._counts: dict[tuple[int, ...], Counter] = {}
        self._context_totals: Counter = Counter()
        self._cache: dict[tuple[int, ...], TokenDistribution] = {}

    def observe(self, seq: Sequence[int]) -> None:
        order = self.n - 1
        for t, token in enumerate(seq):
            if t < order:
                continue
            ctx = tuple(seq[t - order:t])
            self._counts.setdefault(ctx, Counter())[token] += 1
            self._context_totals[ctx] += 1
        self._cache.clear()

    def next_distribution(self, ctx: Sequence[int]) -> TokenDistribution:
        _validate_ctx(ctx, self.vocab)
        order = self.n - 1
        key = tuple(ctx[-order:]) if order else ()
        dist = self._cache.get(key)
        if dist is None:
            v = self.vocab.size
            counts = np.zeros(v, dtype=np.float64)
            for token, c in self._counts.get(key, {}).items():
                counts[token] = c
            total = self._context_totals.get(key, 0)
            probs = (counts + self.alpha) / (total + self.alpha * v)
            dist = TokenDistribution.from_probs(probs, self.vocab)
            self._cache[key] = dist
        return dist


def ngram_fit(
    corpus: Sequence[Sequence[int]],
    n: int,
    alpha: float,
    vocab: Vocab,
    name: str = "ngram",
) -> NgramModel:
    """Fit an additive-smoothed n-gram model on token sequences."""
    model = NgramModel(n, alpha, vocab, name=name)
    n_tokens = 0
    for seq in corpus:
        for t in seq:
            if not 0 <= t < vocab.size:
                raise ValueError(f"corpus token id {t} out of range")
        model.observe(list(seq))
        n_tokens += len(seq)
    if n_tokens == 0:
        raise EmptyCorpusError("corpus contains no tokens")
    return model


def ngram_corpus_load(path: str | Path) -> tuple[list[list[int]], Vocab]:
    """Read a corpus file: header ``vocab <size>``, then one sequence per line."""
    path = Path(path)
    lines = [
        ln.strip()
        for ln in path.read_text(encoding="utf-8").splitlines()
        if ln.strip() and not ln.strip().startswith("#")
    ]
    if not lines:
        raise ParseError(f"{path}: empty corpus file")
    header = lines[0].split()
    if len(header) != 2 or header[0] != "vocab":
        raise ParseError(f"{path}: first line must be 'vocab <size>'")
    vocab = Vocab(int(header[1]))
    corpus = []
    for line in lines[1:]:
        try:
            corpus.append([int(s) for s in line.split()])
        except ValueError as exc:
            raise ParseError(f"{path}: bad token id in corpus line {line!r}") from exc
    return corpus, vocab


class RemoteModel:
    """Client for the HTTP logprob protocol (see README for the wire format).

    Vocabulary size is fetched once from ``/v1/model`` at construction;
    per-step vectors come from ``POST /v1/logprobs``.
    """

    def __init__(self, endpoint: str, timeout: float = 30.0) -> None:
        self.endpoint = endpoint.rstrip("/")
        self.timeout = timeout
        self._session = requests.Session()
        info = self._get_json("/v1/model")
        try:
            self.name = str(info["name"])
            self.vocab = Vocab(int(info["vocab_size"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise ProtocolError(f"malformed /v1/model response: {info!r}") from exc

    def _get_json(self, route: str) -> dict:
        try:
            resp = self._session.get(self.endpoint + route, timeout=self.timeout)
        except requests.RequestException as exc:
            raise RemoteUnavailableError(f"GET {route} failed: {exc}") from exc
        return self._decode(resp, route)

    @staticmethod
    def _decode(resp: requests.Response, route: str) -> dict:
        try:
            body = resp.json()
        except ValueError as exc:
            raise ProtocolError(f"{route}: non-JSON body (status {resp.status_code})") from exc
        if resp.status_code != 200:
            detail = body.get("error", body) if isinstance(body, dict) else body
            raise ProtocolError(f"{route}: status {resp.status_code}: {detail!r}")
        if not isinstance(body, dict):
            raise ProtocolError(f"{route}: expected JSON object, got {type(body).__name__}")
        return body

    def next_distribution(self, ctx: Sequence[int]) -> TokenDistribution:
        _validate_ctx(ctx, self.vocab)
        try:
            resp = self._session.post(
                self.endpoint + "/v1/logprobs",
                json={"tokens": [int(t) for t in ctx]},
                timeout=self.timeout,
            )
        except requests.RequestException as exc:
            raise RemoteUnavailableError(f"POST /v1/logprobs failed: {exc}") from exc
        body = self._decode(resp, "/v1/logprobs")
        logprobs = body.get("logprobs")
        if not isinstance(logprobs, list):
            raise ProtocolError("/v1/logprobs: missing 'logprobs' array")
        if len(logprobs) != self.vocab.size:
            raise VocabMismatchError(
                f"server returned {len(logprobs)} logprobs, vocab size is {self.vocab.size}"
            )
        return normalize_logits(np.asarray(logprobs, dtype=np.float64), self.vocab)


def sample(dist: TokenDistribution, cfg: SamplerConfig, rng: np.random.Generator) -> int:
    """Draw one token: temperature-scale log-probs, nucleus-truncate, sample.

    Candidates are ordered by descending probability with ties broken by
    ascending token id; the first token whose cumulative mass reaches
    ``top_p`` is included, the rest discarded.
    """
    lp = dist.log_probs / cfg.temperature
    lp = lp - np.max(lp)
    probs = np.exp(lp)
    probs /= probs.sum()

    order = np.lexsort((np.arange(dist.vocab.size), -probs))
    sorted_probs = probs[order]
    cum = np.cumsum(sorted_probs)
    cut = int(np.searchsorted(cum, cfg.top_p - 1e-12, side="left"))
    cut = min(cut, dist.vocab.size - 1)
    kept = order[: cut + 1]
    kept_probs = sorted_probs[: cut + 1]
    kept_cum = np.cumsum(kept_probs)
    total = kept_cum[-1]

    u = rng.random() * total
    idx = int(np.searchsorted(kept_cum, u, side="right"))
    idx = min(idx, len(kept) - 1)
    return int(kept[idx])


def effective_sampling_probs(dist: TokenDistribution, cfg: SamplerConfig) -> np.ndarray:
    """Exact post-transform sampling distribution (the oracle for :func:`sample`)."""
    lp = dist.log_probs / cfg.temperature
    lp = lp - np.max(lp)
    probs = np.exp(lp)
    probs /= probs.sum()
    order = np.lexsort((np.arange(dist.vocab.size), -probs))
    sorted_probs = probs[order]
    cum = np.cumsum(sorted_probs)
    cut = int(np.searchsorted(cum, cfg.top_p - 1e-12, side="left"))
    cut = min(cut, dist.vocab.size - 1)
    out = np.zeros_like(probs)
    kept = order[: cut + 1]
    out[kept] = probs[kept] / probs[kept].sum()
    return out
