"""Command-line surface: calibrate, decode, diagnose, scenario, report.

Exit codes: 0 success, 1 fatal runtime error, 2 configuration error.
``FD_LOG`` selects the logging level (debug/info/warning/error).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .calibration import (
    DEFAULT_WINDOW,
    CalibrationStats,
    calibrate,
    collect_scores,
    save_calibration,
)
from .distributions import MetricKind
from .errors import ForkdecodeError, ParseError
from .gated_decoder import read_traces
from .harness import (
    ExperimentConfig,
    PromptRecord,
    load_prompts,
    parse_model_spec,
    read_verdicts,
    recovery,
    run_experiment,
    save_prompts,
)
from .models import SamplerConfig
from .reports import write_reports
from .scenario import ScenarioSpec, build_scenario

log = logging.getLogger("forkdecode")

DECODER_ALIASES = {
    "guided": "guided",
    "base": "base_only",
    "guide": "guide_only",
    "random": "random",
    "early": "early_only",
    "entropy": "entropy_gated",
}


class ConfigError(ValueError):
    pass


def _add_sampler_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--temperature", type=float, default=0.6)
    parser.add_argument("--top-p", type=float, default=0.95, dest="top_p")
    parser.add_argument("--max-len", type=int, default=16384, dest="max_len")
    parser.add_argument("--eos-id", type=int, default=None, dest="eos_id")


def _sampler_from_args(args) -> SamplerConfig:
    return SamplerConfig(
        temperature=args.temperature,
        top_p=args.top_p,
        seed=args.seed,
        max_len=args.max_len,
        eos_id=args.eos_id,
    )


def cmd_calibrate(args) -> int:
    records = load_prompts(args.prompts)
    if any(r.tokens is None for r in records):
        raise ConfigError("calibration prompts must be token mode")
    metric = MetricKind(args.metric)
    base = parse_model_spec(args.base)
    guide = parse_model_spec(args.guide) if args.guide else None
    if metric.needs_guide and guide is None:
        raise ConfigError(f"metric {metric.value!r} requires --guide")
    sampler = _sampler_from_args(args)
    sample = collect_scores(
        base, guide, [r.tokens for r in records], sampler, metric
    )
    stats = calibrate(sample, args.r)
    stats = CalibrationStats(
        tau=stats.tau,
        lam=stats.lam,
        r=stats.r,
        metric=stats.metric,
        sample_size=stats.sample_size,
        window=args.window,
    )
    save_calibration(stats, args.out)
    log.info(
        "calibrated %s on %d scores: tau=%.6g lambda=%.6g",
        metric.value, stats.sample_size, stats.tau, stats.lam,
    )
    print(json.dumps({"tau": stats.tau, "lambda": stats.lam, "sample_size": stats.sample_size}))
    return 0


def cmd_decode(args) -> int:
    out_path = Path(args.out)
    decoder_kind = DECODER_ALIASES[args.decoder]
    cfg = ExperimentConfig(
        prompts_path=args.prompts,
        base_spec=args.base,
        guide_spec=args.guide,
        decoder_kind=decoder_kind,
        calibration_path=args.cal,
        rho_target=args.rho,
        sampler=_sampler_from_args(args),
        k=args.k,
        seed=args.seed,
        output_dir=str(out_path.parent if out_path.suffix else out_path),
        jobs=args.jobs,
    )
    metrics = run_experiment(cfg)
    run_dir = Path(cfg.output_dir)
    if out_path.suffix and out_path.name != "traces.jsonl":
        (run_dir / "traces.jsonl").replace(out_path)
    print(
        json.dumps(
            {
                "decoder": decoder_kind,
                "accuracy": metrics["accuracy"],
                "pass_at_k": metrics["pass_at_k"],
                "mean_rho": metrics["mean_rho"],
            }
        )
    )
    return 0


def cmd_diagnose(args) -> int:
    traces = read_traces(args.traces)
    verdicts = read_verdicts(args.verdicts) if args.verdicts else None
    baseline = read_verdicts(args.baseline_verdicts) if args.baseline_verdicts else None
    summary = write_reports(
        traces,
        args.out,
        verdicts=verdicts,
        baseline_verdicts=baseline,
        top_fraction=args.top_fraction,
        failure_k=args.k,
        bins=args.bins,
    )
    print(json.dumps({"out": args.out, "n_traces": summary["n_traces"]}))
    return 0


def cmd_scenario(args) -> int:
    doc = json.loads(Path(args.spec).read_text(encoding="utf-8"))
    try:
        spec = ScenarioSpec(
            n_forks=doc["n_forks"],
            fork_positions=tuple(doc["fork_positions"]),
            base_error_prob=doc["base_error_prob"],
            filler_length=doc["filler_length"],
            guide_correct_prob=doc.get("guide_correct_prob") or (),
            filler_noise=doc.get("filler_noise", 1e-4),
            n_prompts=doc.get("n_prompts", 1),
        )
    except KeyError as exc:
        raise ConfigError(f"scenario spec missing field {exc}") from exc
    scn = build_scenario(spec, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    scn.base.save(out / "base.table")
    scn.guide.save(out / "guide.table")
    save_prompts(
        out / "prompts.jsonl",
        [
            PromptRecord(id=pid, tokens=tokens, gold_tokens=gold)
            for pid, tokens, gold in scn.prompts()
        ],
    )
    meta = {
        "eos_id": scn.eos_id,
        "vocab_size": spec.vocab_size,
        "script_length": spec.script_length,
        "total_steps": spec.total_steps,
        "fork_positions": list(spec.fork_positions),
        "seed": args.seed,
    }
    (out / "scenario.json").write_text(json.dumps(meta, indent=2) + "\n")
    print(json.dumps({"out": str(out), "vocab_size": spec.vocab_size}))
    return 0


def cmd_report(args) -> int:
    rows = []
    for run_dir in args.runs:
        metrics_path = Path(run_dir) / "metrics.json"
        if not metrics_path.exists():
            raise ConfigError(f"{run_dir}: no metrics.json (not a run directory?)")
        doc = json.loads(metrics_path.read_text(encoding="utf-8"))
        rows.append(
            {
                "run": str(run_dir),
                "decoder_kind": doc["decoder_kind"],
                "k": doc["k"],
                "accuracy": doc["accuracy"],
                "pass_at_k": doc["pass_at_k"],
                "mean_rho": doc["mean_rho"],
            }
        )
    base = next((r for r in rows if r["decoder_kind"] == "base_only"), None)
    strong = next((r for r in rows if r["decoder_kind"] == "guide_only"), None)
    for row in rows:
        row["recovery_pass_at_k"] = None
        row["recovery_accuracy"] = None
        if (
            base is not None
            and strong is not None
            and row["decoder_kind"] not in ("base_only", "guide_only")
        ):
            try:
                row["recovery_pass_at_k"] = recovery(
                    row["pass_at_k"], base["pass_at_k"], strong["pass_at_k"]
                )
                row["recovery_accuracy"] = recovery(
                    row["accuracy"], base["accuracy"], strong["accuracy"]
                )
            except ValueError:
                pass

    header = ["run", "decoder_kind", "k", "accuracy", "pass_at_k", "mean_rho",
              "recovery_accuracy", "recovery_pass_at_k"]
    print("\t".join(header))
    for row in rows:
        print("\t".join(_fmt(row[h]) for h in header))
    if args.out:
        import csv

        with open(args.out, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            for row in rows:
                writer.writerow([row[h] for h in header])
    return 0


def _fmt(v) -> str:
    if v is None:
        return "-"
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="forkdecode",
        description="Dual-model decoding with calibrated one-token takeovers, plus trace diagnostics.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("calibrate", help="derive gate threshold/scale from base rollouts")
    p.add_argument("--base", required=True)
    p.add_argument("--guide", default=None)
    p.add_argument("--prompts", required=True)
    p.add_argument("--metric", choices=[m.value for m in MetricKind], default="ce")
    p.add_argument("--r", type=float, default=0.05, help="target spike ratio in (0, 1)")
    p.add_argument("--window", type=int, default=DEFAULT_WINDOW)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    _add_sampler_flags(p)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("decode", help="run rollouts under one decoder kind")
    p.add_argument("--base", required=True)
    p.add_argument("--guide", default=None)
    p.add_argument("--prompts", required=True)
    p.add_argument("--decoder", choices=sorted(DECODER_ALIASES), required=True)
    p.add_argument("--cal", default=None, help="calibration JSON (gated decoders)")
    p.add_argument("--rho", type=float, default=None, help="budget for random/early baselines")
    p.add_argument("--k", type=int, default=8, help="samples per prompt")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", required=True, help="traces.jsonl path (siblings hold verdicts/metrics)")
    _add_sampler_flags(p)
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("diagnose", help="emit CSV/JSON reports over a trace file")
    p.add_argument("--traces", required=True)
    p.add_argument("--verdicts", default=None)
    p.add_argument("--baseline-verdicts", default=None, dest="baseline_verdicts",
                   help="verdicts of a reference run, enables flip analysis")
    p.add_argument("--top-fraction", type=float, default=0.01, dest="top_fraction")
    p.add_argument("--k", type=int, default=100, help="top-K for failure scores")
    p.add_argument("--bins", type=int, default=50)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("scenario", help="generate paired fork-scenario table models")
    p.add_argument("--spec", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_scenario)

    p = sub.add_parser("report", help="compare runs (accuracy / Pass@K / budget / recovery)")
    p.add_argument("--runs", nargs="+", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    level = os.environ.get("FD_LOG", "warning").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING))
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ParseError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except ForkdecodeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
