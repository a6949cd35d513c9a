"""CSV/JSON report emission over trace files.

One CSV per analysis (gini, lorenz, position_hist, iou, enrichment,
failure, flips, budget) plus a combined summary.json. Column layouts are
documented in the README; plotting is left to whatever consumes the CSVs.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Sequence

import numpy as np

from .diagnostics import (
    TokenCategory,
    _top_set,
    auroc,
    accuracy_at_threshold,
    budget_summary,
    enrichment,
    failure_score,
    flip_stats,
    gini,
    iou_topp,
    lorenz_curve,
    position_density,
    top_fraction_positions,
)
from .errors import (
    AllZeroError,
    NoClassifiableTokensError,
    SingleClassError,
    ZeroGlobalShareError,
)
from .gated_decoder import RolloutTrace
from .harness import Verdict

DEFAULT_TOP_FRACTION = 0.01
IOU_GRID = (0.01, 0.02, 0.05, 0.1, 0.2)


def _write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def _pass_by_problem(verdicts: Sequence[Verdict]) -> dict[str, bool]:
    by_problem: dict[str, bool] = {}
    for v in verdicts:
        by_problem[v.prompt_id] = by_problem.get(v.prompt_id, False) or v.correct
    return by_problem


def write_reports(
    traces: Sequence[RolloutTrace],
    out_dir: str | Path,
    verdicts: Sequence[Verdict] | None = None,
    baseline_verdicts: Sequence[Verdict] | None = None,
    *,
    top_fraction: float = DEFAULT_TOP_FRACTION,
    failure_k: int = 100,
    bins: int = 50,
) -> dict:
    """Run every applicable analysis and emit the report files.

    Returns the combined summary (also written to summary.json). Analyses
    whose inputs are missing (no verdicts, no decoded text, single-class
    labels) are skipped and marked null in the summary.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    summary: dict = {"n_traces": len(traces)}

    # Sparsity: per-trace Gini, pooled-score Lorenz curve.
    gini_rows = []
    ginis = []
    for t in traces:
        scores = [s.score for s in t.steps]
        try:
            g = gini(scores)
        except AllZeroError:
            g = None
        gini_rows.append([t.prompt_id, t.sample_index, len(t.steps), g])
        if g is not None:
            ginis.append(g)
    _write_csv(out / "gini.csv", ["prompt_id", "sample_index", "n_steps", "gini"], gini_rows)
    summary["gini"] = {"mean": float(np.mean(ginis)) if ginis else None, "n": len(ginis)}

    pooled = [s.score for t in traces for s in t.steps]
    try:
        curve = lorenz_curve(pooled)
        _write_csv(out / "lorenz.csv", ["x", "y"], [[x, y] for x, y in curve.points])
    except AllZeroError:
        _write_csv(out / "lorenz.csv", ["x", "y"], [])

    # Positional density of top-scoring tokens.
    positions = [u for t in traces for u in top_fraction_positions(t, top_fraction)]
    hist = position_density(positions, bins=bins)
    _write_csv(
        out / "position_hist.csv",
        ["bin_left", "bin_right", "density"],
        [
            [hist.edges[i], hist.edges[i + 1], hist.density[i]]
            for i in range(len(hist.density))
        ],
    )
    mode_bin = int(np.argmax(hist.density))
    summary["position"] = {
        "top_fraction": top_fraction,
        "mode_bin_left": hist.edges[mode_bin],
        "mode_bin_right": hist.edges[mode_bin + 1],
    }

    # Disagreement/uncertainty ranking overlap, per sample then averaged.
    iou_rows = []
    iou_summary = {}
    for p in IOU_GRID:
        vals = []
        for t in traces:
            scores = [s.score for s in t.steps]
            entropies = [s.base_entropy for s in t.steps]
            vals.append(iou_topp(scores, entropies, p))
        mean_iou = float(np.mean(vals))
        iou_rows.append([p, mean_iou, len(vals)])
        iou_summary[str(p)] = mean_iou
    _write_csv(out / "iou.csv", ["p", "mean_iou", "n_traces"], iou_rows)
    summary["iou"] = iou_summary

    # Enrichment needs decoded text.
    texts_available = any(s.text is not None for t in traces for s in t.steps)
    enrich_rows = []
    if texts_available:
        stream = [s.text for t in traces for s in t.steps if s.text is not None]
        analyses: dict[str, list[str]] = {}
        peak_score: list[str] = []
        peak_entropy: list[str] = []
        for t in traces:
            texts = [s.text for s in t.steps]
            if any(x is None for x in texts):
                continue
            scores = [s.score for s in t.steps]
            entropies = [s.base_entropy for s in t.steps]
            peak_score.extend(texts[i] for i in _top_set(scores, top_fraction))
            peak_entropy.extend(texts[i] for i in _top_set(entropies, top_fraction))
        analyses["peak_score"] = peak_score
        analyses["peak_entropy"] = peak_entropy
        takeover = [
            s.text
            for t in traces
            for s in t.steps
            if s.chosen_from == "guide" and s.text is not None
        ]
        if takeover:
            analyses["takeover"] = takeover
        for name, target in analyses.items():
            for cat in (TokenCategory.PLANNING, TokenCategory.EXECUTION):
                try:
                    row = enrichment(stream, target, cat)
                except (NoClassifiableTokensError, ZeroGlobalShareError):
                    continue
                enrich_rows.append(
                    [name, cat.value, row.global_share, row.target_share, row.enrichment]
                )
    _write_csv(
        out / "enrichment.csv",
        ["analysis", "category", "global_share", "target_share", "enrichment"],
        enrich_rows,
    )
    summary["enrichment"] = [
        {
            "analysis": r[0],
            "category": r[1],
            "global_share": r[2],
            "target_share": r[3],
            "enrichment": r[4],
        }
        for r in enrich_rows
    ]

    # Failure prediction: top-K mean score vs verdict labels.
    summary["failure"] = None
    failure_rows = []
    if verdicts is not None:
        verdict_by_key = {(v.prompt_id, v.sample_index): v.correct for v in verdicts}
        scores, labels = [], []
        for t in traces:
            correct = verdict_by_key.get((t.prompt_id, t.sample_index))
            if correct is None:
                continue
            fs = failure_score(t, failure_k)
            label = 0 if correct else 1
            failure_rows.append([t.prompt_id, t.sample_index, fs, label])
            scores.append(fs)
            labels.append(label)
        fail_summary: dict = {"k": failure_k, "n": len(scores)}
        try:
            fail_summary["auroc"] = auroc(scores, labels)
            acc, thr = accuracy_at_threshold(scores, labels)
            fail_summary["accuracy"] = acc
            fail_summary["threshold"] = thr
        except SingleClassError:
            fail_summary["auroc"] = None
            fail_summary["accuracy"] = None
            fail_summary["threshold"] = None
        summary["failure"] = fail_summary
    _write_csv(
        out / "failure.csv",
        ["prompt_id", "sample_index", "failure_score", "incorrect"],
        failure_rows,
    )

    # Pass@K flips between a baseline run and this run.
    summary["flips"] = None
    flip_rows = []
    if verdicts is not None and baseline_verdicts is not None:
        now = _pass_by_problem(verdicts)
        before = _pass_by_problem(baseline_verdicts)
        stats = flip_stats(before, now)
        for pid in sorted(before):
            b, g = before[pid], now[pid]
            kind = (
                "err_to_correct" if (not b and g)
                else "correct_to_err" if (b and not g)
                else "unchanged"
            )
            flip_rows.append([pid, b, g, kind])
        summary["flips"] = {
            "err_to_correct": stats.err_to_correct,
            "correct_to_err": stats.correct_to_err,
            "unchanged": stats.unchanged,
        }
    _write_csv(
        out / "flips.csv", ["prompt_id", "base_pass", "guided_pass", "flip"], flip_rows
    )

    # Realized budget.
    budget = budget_summary(traces)
    _write_csv(
        out / "budget.csv",
        ["prompt_id", "sample_index", "rho"],
        [list(row) for row in budget.per_problem],
    )
    summary["budget"] = {"mean_rho": budget.mean_rho, "std_rho": budget.std_rho}

    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    return summary
