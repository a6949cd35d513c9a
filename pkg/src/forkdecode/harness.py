"""Experiment orchestration: prompt ingestion, multi-sample rollouts,
answer verification, Pass@K / mean-accuracy aggregation, and run artifacts
(traces.jsonl, verdicts.jsonl, metrics.json).

All randomness flows from one experiment seed: the rollout for
``(prompt_id, sample_index)`` uses a generator seeded from
``SeedSequence([seed, sha256(prompt_id), sample_index])``, so results are
independent of execution order and worker count.
"""

from __future__ import annotations

import hashlib
import json
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .calibration import CalibrationStats, load_calibration
from .distributions import MetricKind
from .errors import (
    EmptyPromptSetError,
    ParseError,
    ProtocolError,
    RemoteUnavailableError,
)
from .gated_decoder import (
    GateConfig,
    RolloutTrace,
    base_only_decode,
    early_only_decode,
    entropy_gated_decode,
    gated_decode,
    guide_only_decode,
    random_budget_decode,
    write_traces,
)
from .models import (
    Model,
    RemoteModel,
    SamplerConfig,
    ngram_corpus_load,
    ngram_fit,
    table_model_load,
)

# Reserved sample index for the guide-length probe rollout used by the
# early-only baseline; real samples use 0..K-1.
GUIDE_LEN_PROBE_INDEX = 2**32

# Default wrapper for text-mode problems on tokenizer-backed integrations;
# token-mode runs feed raw token prompts and never use it.
DEFAULT_PROMPT_TEMPLATE = (
    "Please reason step by step, and put your final answer within \\boxed{{}}.\n"
    "This is the problem:\n{prompt}"
)


def render_prompt(problem: str, template: str = DEFAULT_PROMPT_TEMPLATE) -> str:
    return template.format(prompt=problem)


@dataclass(frozen=True)
class PromptRecord:
    """One problem: text mode (prompt/gold strings) or token mode."""

    id: str
    prompt: str | None = None
    gold: str | None = None
    tokens: tuple[int, ...] | None = None
    gold_tokens: tuple[int, ...] | None = None

    def __post_init__(self) -> None:
        text_mode = self.prompt is not None and self.gold is not None
        token_mode = self.tokens is not None and self.gold_tokens is not None
        if not (text_mode or token_mode):
            raise ParseError(
                f"prompt {self.id!r} needs either prompt/gold or tokens/gold_tokens"
            )

    @property
    def token_mode(self) -> bool:
        return self.tokens is not None


def load_prompts(path: str | Path) -> list[PromptRecord]:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                doc = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"{path}:{lineno}: bad JSON") from exc
            records.append(
                PromptRecord(
                    id=str(doc["id"]),
                    prompt=doc.get("prompt"),
                    gold=doc.get("gold"),
                    tokens=tuple(doc["tokens"]) if "tokens" in doc else None,
                    gold_tokens=tuple(doc["gold_tokens"]) if "gold_tokens" in doc else None,
                )
            )
    if not records:
        raise EmptyPromptSetError(f"{path}: no prompts")
    return records


def save_prompts(path: str | Path, records: Sequence[PromptRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            doc: dict = {"id": rec.id}
            if rec.token_mode:
                doc["tokens"] = list(rec.tokens)
                doc["gold_tokens"] = list(rec.gold_tokens)
            else:
                doc["prompt"] = rec.prompt
                doc["gold"] = rec.gold
            fh.write(json.dumps(doc) + "\n")


# --- answer verification ------------------------------------------------------


@dataclass(frozen=True)
class Verdict:
    prompt_id: str
    sample_index: int
    correct: bool
    extracted_answer: str | None


def extract_boxed(text: str) -> str | None:
    """Contents of the last ``\\boxed{...}`` span, with balanced braces."""
    marker = "\\boxed{"
    start = text.rfind(marker)
    if start < 0:
        return None
    depth = 1
    begin = start + len(marker)
    for j in range(begin, len(text)):
        c = text[j]
        if c == "{":
            depth += 1
        elif c == "}":
            depth -= 1
            if depth == 0:
                return text[begin:j]
    return None


def normalize_answer(s: str) -> str:
    """Drop all whitespace; canonicalize integer strings (leading zeros, +)."""
    s = "".join(s.split())
    if re.fullmatch(r"[+-]?\d+", s):
        return str(int(s))
    return s


def verify_answer(
    response_text: str,
    gold: str,
    verifier_kind: str = "boxed",
    *,
    prompt_id: str = "",
    sample_index: int = 0,
) -> Verdict:
    """Built-in verifiers: ``boxed`` (compare the last boxed span) and
    ``exact`` (compare the whole response). Anything unparseable is
    conservatively judged incorrect."""
    if not gold:
        raise ValueError("gold answer must be nonempty")
    if verifier_kind == "boxed":
        extracted = extract_boxed(response_text)
    elif verifier_kind == "exact":
        extracted = response_text
    else:
        raise ValueError(f"unknown verifier kind {verifier_kind!r}")
    correct = extracted is not None and normalize_answer(extracted) == normalize_answer(gold)
    return Verdict(
        prompt_id=prompt_id,
        sample_index=sample_index,
        correct=correct,
        extracted_answer=extracted,
    )


def verify_tokens(
    emitted: Sequence[int],
    gold_tokens: Sequence[int],
    eos_id: int | None,
    *,
    prompt_id: str = "",
    sample_index: int = 0,
) -> Verdict:
    """Token-mode exact match; a single trailing EOS is not part of the answer."""
    toks = list(emitted)
    if eos_id is not None and toks and toks[-1] == eos_id:
        toks = toks[:-1]
    correct = toks == list(gold_tokens)
    return Verdict(
        prompt_id=prompt_id,
        sample_index=sample_index,
        correct=correct,
        extracted_answer=" ".join(str(t) for t in toks),
    )


def write_verdicts(path: str | Path, verdicts: Sequence[Verdict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for v in verdicts:
            fh.write(
                json.dumps(
                    {
                        "prompt_id": v.prompt_id,
                        "sample_index": v.sample_index,
                        "correct": v.correct,
                        "extracted_answer": v.extracted_answer,
                    }
                )
                + "\n"
            )


def read_verdicts(path: str | Path) -> list[Verdict]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                doc = json.loads(line)
                out.append(
                    Verdict(
                        prompt_id=str(doc["prompt_id"]),
                        sample_index=int(doc["sample_index"]),
                        correct=bool(doc["correct"]),
                        extracted_answer=doc.get("extracted_answer"),
                    )
                )
    return out


# --- model specs ----------------------------------------------------------------


def parse_model_spec(spec: str) -> Model:
    """``table:<path>``, ``ngram:<path>:<n>:<alpha>``, or ``remote:<url>``."""
    kind, _, rest = spec.partition(":")
    if not rest:
        raise ParseError(f"bad model spec {spec!r}")
    if kind == "table":
        return table_model_load(rest)
    if kind == "ngram":
        try:
            path, n_str, alpha_str = rest.rsplit(":", 2)
            n, alpha = int(n_str), float(alpha_str)
        except ValueError as exc:
            raise ParseError(f"bad ngram spec {spec!r} (want ngram:<path>:<n>:<alpha>)") from exc
        corpus, vocab = ngram_corpus_load(path)
        return ngram_fit(corpus, n, alpha, vocab, name=Path(path).stem)
    if kind == "remote":
        return RemoteModel(rest)
    raise ParseError(f"unknown model backend {kind!r} in spec {spec!r}")


# --- experiment running -----------------------------------------------------------


@dataclass(frozen=True)
class ExperimentConfig:
    prompts_path: str
    base_spec: str
    decoder_kind: str
    output_dir: str
    guide_spec: str | None = None
    calibration_path: str | None = None
    rho_target: float | None = None
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    k: int = 8
    seed: int = 0
    verifier_kind: str = "boxed"
    jobs: int = 1

    def __post_init__(self) -> None:
        if self.k < 1:
            raise ValueError("samples per prompt must be >= 1")
        if self.decoder_kind in ("guided", "entropy_gated") and not self.calibration_path:
            raise ValueError(f"decoder {self.decoder_kind!r} requires a calibration file")
        if self.decoder_kind in ("random", "early_only") and self.rho_target is None:
            raise ValueError(f"decoder {self.decoder_kind!r} requires rho_target")
        if self.decoder_kind != "base_only" and self.guide_spec is None:
            raise ValueError(f"decoder {self.decoder_kind!r} requires a guide model")


def derive_rng(seed: int, prompt_id: str, sample_index: int) -> np.random.Generator:
    """Per-rollout stream: stable across runs, workers, and orderings."""
    pid_hash = int.from_bytes(
        hashlib.sha256(prompt_id.encode("utf-8")).digest()[:8], "little"
    )
    return np.random.default_rng(
        np.random.SeedSequence([seed & (2**64 - 1), pid_hash, sample_index])
    )


def _decode_one(
    cfg: ExperimentConfig,
    base: Model,
    guide: Model | None,
    gate_cfg: GateConfig | None,
    metric: MetricKind,
    rec: PromptRecord,
    sample_index: int,
    guide_len: int | None,
) -> RolloutTrace:
    rng = derive_rng(cfg.seed, rec.id, sample_index)
    prompt = rec.tokens
    kw = dict(prompt_id=rec.id, sample_index=sample_index)
    kind = cfg.decoder_kind
    if kind == "guided":
        return gated_decode(base, guide, prompt, gate_cfg, cfg.sampler, rng, **kw)
    if kind == "entropy_gated":
        return entropy_gated_decode(base, guide, prompt, gate_cfg, cfg.sampler, rng, **kw)
    if kind == "base_only":
        return base_only_decode(base, guide, prompt, cfg.sampler, rng, metric=metric, **kw)
    if kind == "guide_only":
        return guide_only_decode(base, guide, prompt, cfg.sampler, rng, metric=metric, **kw)
    if kind == "random":
        return random_budget_decode(
            base, guide, prompt, cfg.rho_target, cfg.sampler, rng, metric=metric, **kw
        )
    if kind == "early_only":
        return early_only_decode(
            base, guide, prompt, cfg.rho_target, guide_len, cfg.sampler, rng,
            metric=metric, **kw,
        )
    raise ValueError(f"unknown decoder kind {kind!r}")


def _guide_lengths(
    cfg: ExperimentConfig,
    base: Model,
    guide: Model,
    records: Sequence[PromptRecord],
    out_dir: Path,
    metric: MetricKind,
) -> dict[str, int]:
    """One guide-only probe rollout per prompt, cached in the run directory."""
    cache = out_dir / "guide_lens.json"
    if cache.exists():
        return {k: int(v) for k, v in json.loads(cache.read_text()).items()}
    lens = {}
    for rec in records:
        rng = derive_rng(cfg.seed, rec.id, GUIDE_LEN_PROBE_INDEX)
        trace = guide_only_decode(
            base, guide, rec.tokens, cfg.sampler, rng,
            metric=metric, prompt_id=rec.id, sample_index=0,
        )
        lens[rec.id] = len(trace.steps)
    cache.write_text(json.dumps(lens, indent=2, sort_keys=True))
    return lens


def run_experiment(cfg: ExperimentConfig) -> dict:
    """Run K rollouts per prompt, verify, aggregate, and write run artifacts.

    Per-rollout transport failures are recorded in failures.jsonl (the
    sample is conservatively judged incorrect) and the run continues.
    """
    records = load_prompts(cfg.prompts_path)
    if any(not r.token_mode for r in records):
        raise ParseError(
            "text-mode prompts need a tokenizer-backed model; desk-scale runs are token-mode"
        )
    base = parse_model_spec(cfg.base_spec)
    guide = parse_model_spec(cfg.guide_spec) if cfg.guide_spec else None

    stats: CalibrationStats | None = None
    gate_cfg: GateConfig | None = None
    if cfg.calibration_path:
        stats = load_calibration(cfg.calibration_path)
        gate_cfg = GateConfig.from_calibration(stats)
    if stats is not None:
        metric = stats.metric
    else:
        metric = MetricKind.CROSS_ENTROPY if guide is not None else MetricKind.BASE_ENTROPY

    out_dir = Path(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    guide_lens: dict[str, int] = {}
    if cfg.decoder_kind == "early_only":
        guide_lens = _guide_lengths(cfg, base, guide, records, out_dir, metric)

    tasks = [(rec, k) for rec in records for k in range(cfg.k)]

    def run_task(task: tuple[PromptRecord, int]):
        rec, k = task
        try:
            trace = _decode_one(
                cfg, base, guide, gate_cfg, metric, rec, k, guide_lens.get(rec.id)
            )
            return rec, k, trace, None
        except (RemoteUnavailableError, ProtocolError) as exc:
            return rec, k, None, str(exc)

    if cfg.jobs > 1:
        with ThreadPoolExecutor(max_workers=cfg.jobs) as pool:
            results = list(pool.map(run_task, tasks))
    else:
        results = [run_task(t) for t in tasks]
    results.sort(key=lambda r: (r[0].id, r[1]))

    traces: list[RolloutTrace] = []
    verdicts: list[Verdict] = []
    failures: list[dict] = []
    for rec, k, trace, err in results:
        if trace is None:
            failures.append({"prompt_id": rec.id, "sample_index": k, "error": err})
            verdicts.append(Verdict(rec.id, k, correct=False, extracted_answer=None))
            continue
        traces.append(trace)
        verdicts.append(
            verify_tokens(
                trace.tokens, rec.gold_tokens, cfg.sampler.eos_id,
                prompt_id=rec.id, sample_index=k,
            )
        )

    write_traces(out_dir / "traces.jsonl", traces)
    write_verdicts(out_dir / "verdicts.jsonl", verdicts)
    if failures:
        with open(out_dir / "failures.jsonl", "w", encoding="utf-8") as fh:
            for doc in failures:
                fh.write(json.dumps(doc) + "\n")

    metrics = aggregate_metrics(cfg, verdicts, traces, n_failures=len(failures))
    (out_dir / "metrics.json").write_text(json.dumps(metrics, indent=2) + "\n")
    return metrics


def aggregate_metrics(
    cfg: ExperimentConfig,
    verdicts: Sequence[Verdict],
    traces: Sequence[RolloutTrace],
    n_failures: int = 0,
) -> dict:
    by_problem: dict[str, list[bool]] = {}
    for v in verdicts:
        by_problem.setdefault(v.prompt_id, []).append(v.correct)
    per_problem = []
    rho_by_problem: dict[str, list[float]] = {}
    for t in traces:
        rho_by_problem.setdefault(t.prompt_id, []).append(t.realized_rate)
    for pid in sorted(by_problem):
        outcomes = by_problem[pid]
        rhos = rho_by_problem.get(pid, [])
        per_problem.append(
            {
                "prompt_id": pid,
                "accuracy": sum(outcomes) / len(outcomes),
                "pass": any(outcomes),
                "mean_rho": sum(rhos) / len(rhos) if rhos else None,
            }
        )
    accuracy = sum(v.correct for v in verdicts) / len(verdicts) if verdicts else 0.0
    pass_at_k = (
        sum(1 for p in per_problem if p["pass"]) / len(per_problem) if per_problem else 0.0
    )
    rhos = [t.realized_rate for t in traces]
    return {
        "decoder_kind": cfg.decoder_kind,
        "k": cfg.k,
        "seed": cfg.seed,
        "n_prompts": len(by_problem),
        "n_samples": len(verdicts),
        "n_failures": n_failures,
        "accuracy": accuracy,
        "pass_at_k": pass_at_k,
        "mean_rho": float(np.mean(rhos)) if rhos else 0.0,
        "std_rho": float(np.std(rhos)) if rhos else 0.0,
        "per_problem": per_problem,
    }


def recovery(p_guided: float, p_base: float, p_strong: float) -> float:
    """Fraction of the base-to-strong gap closed by the intervention."""
    gap = p_strong - p_base
    if gap == 0:
        raise ValueError("recovery undefined: strong and base scores are equal")
    return (p_guided - p_base) / gap
