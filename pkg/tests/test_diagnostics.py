"""Diagnostics against brute-force oracles: O(N^2) mean-absolute-difference
Gini, pairwise AUROC, explicit top-set construction, direct counting for
enrichment/flips/budget."""

import math

import numpy as np
import pytest

from forkdecode.diagnostics import (
    TokenCategory,
    accuracy_at_threshold,
    auroc,
    budget_summary,
    classify_token,
    enrichment,
    failure_score,
    flip_stats,
    gini,
    iou_topp,
    lorenz_curve,
    position_density,
    top_fraction_positions,
)
from forkdecode.errors import (
    AllZeroError,
    IdMismatchError,
    LengthMismatchError,
    NegativeScoreError,
    NoClassifiableTokensError,
    SingleClassError,
    ZeroGlobalShareError,
)

from conftest import make_trace


def gini_mad_oracle(scores) -> float:
    """Mean-absolute-difference form: sum |s_i - s_j| / (2 N^2 mean)."""
    arr = np.asarray(scores, dtype=np.float64)
    n = arr.size
    total = 0.0
    for i in range(n):
        for j in range(n):
            total += abs(arr[i] - arr[j])
    return total / (2 * n * n * arr.mean())


def auroc_pairwise_oracle(scores, labels) -> float:
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    credit = 0.0
    for p in pos:
        for q in neg:
            if p > q:
                credit += 1.0
            elif p == q:
                credit += 0.5
    return credit / (len(pos) * len(neg))


def top_set_oracle(scores, p):
    n = len(scores)
    k = min(max(math.ceil(p * n - 1e-9), 1), n)
    decorated = sorted(((-s, i) for i, s in enumerate(scores)))
    return {i for _, i in decorated[:k]}


class TestGini:
    def test_uniform_is_zero(self):
        for n in (1, 2, 10, 137):
            assert abs(gini([3.7] * n)) <= 1e-12

    def test_single_mass(self):
        assert abs(gini([0.0, 0.0, 0.0, 1.0]) - 0.75) <= 1e-12
        for n in (2, 5, 50):
            scores = [0.0] * (n - 1) + [2.5]
            assert abs(gini(scores) - (n - 1) / n) <= 1e-12

    def test_matches_mad_oracle_on_random_vectors(self):
        rng = np.random.default_rng(314)
        for _ in range(50):
            n = int(rng.integers(1, 201))
            scores = rng.exponential(1.0, size=n)
            assert abs(gini(scores) - gini_mad_oracle(scores)) <= 1e-9

    def test_scale_invariance(self):
        rng = np.random.default_rng(6)
        scores = rng.exponential(1.0, size=100)
        for c in (1e-6, 0.5, 3.0, 1e6):
            assert abs(gini(scores) - gini(c * scores)) <= 1e-12

    def test_permutation_invariance(self):
        rng = np.random.default_rng(7)
        scores = rng.exponential(1.0, size=60)
        assert gini(scores) == gini(rng.permutation(scores))

    def test_bounds(self):
        rng = np.random.default_rng(8)
        for _ in range(30):
            n = int(rng.integers(1, 100))
            g = gini(rng.exponential(1.0, size=n))
            assert -1e-12 <= g <= (n - 1) / n + 1e-12

    def test_errors(self):
        with pytest.raises(NegativeScoreError):
            gini([1.0, -0.1])
        with pytest.raises(AllZeroError):
            gini([0.0, 0.0])


class TestLorenz:
    def test_curve_properties(self):
        rng = np.random.default_rng(9)
        for _ in range(20):
            n = int(rng.integers(1, 80))
            curve = lorenz_curve(rng.exponential(1.0, size=n))
            xs = [p[0] for p in curve.points]
            ys = [p[1] for p in curve.points]
            assert xs == sorted(xs) and ys == sorted(ys)
            assert abs(xs[-1] - 1.0) <= 1e-12 and abs(ys[-1] - 1.0) <= 1e-12
            assert all(y <= x + 1e-12 for x, y in curve.points)
            assert abs(xs[0] - 1 / n) <= 1e-12


class TestPositions:
    def test_single_selection(self):
        scores = [0.1] * 100
        scores[4] = 9.0  # t = 5
        trace = make_trace(scores)
        assert top_fraction_positions(trace, 0.01) == [0.05]

    def test_tie_break_earliest(self):
        trace = make_trace([1.0] * 10)
        assert top_fraction_positions(trace, 0.10) == [pytest.approx(0.1)]

    def test_density_integrates_to_one(self):
        rng = np.random.default_rng(10)
        positions = rng.uniform(0.01, 1.0, size=500)
        hist = position_density(positions, bins=50)
        width = hist.edges[1] - hist.edges[0]
        assert abs(sum(hist.density) * width - 1.0) <= 1e-9

    def test_early_spikes_land_in_first_decile(self):
        traces = []
        for i in range(30):
            scores = [0.01] * 64
            scores[2] = 5.0  # u = 3/64 ~ 0.047
            traces.append(make_trace(scores, prompt_id=f"p{i}"))
        positions = [u for t in traces for u in top_fraction_positions(t, 0.02)]
        hist = position_density(positions, bins=50)
        mode = int(np.argmax(hist.density))
        assert hist.edges[mode + 1] <= 0.1


class TestIoU:
    def test_identical_rankings(self):
        rng = np.random.default_rng(11)
        scores = list(rng.normal(size=40))
        assert iou_topp(scores, scores, 0.1) == 1.0

    def test_disjoint_hand_case(self):
        a = [3, 1, 2, 5, 4]
        b = [5, 4, 3, 2, 1]
        # A = {4, 5}, B = {1, 2} (1-based) -> disjoint
        assert iou_topp(a, b, 0.4) == 0.0

    def test_partial_overlap_hand_case(self):
        a = [5, 4, 1, 1, 1]
        b = [5, 1, 4, 1, 1]
        # A = {1, 2}, B = {1, 3} -> 1/3
        assert abs(iou_topp(a, b, 0.4) - 1 / 3) <= 1e-12

    def test_symmetry_and_self(self):
        rng = np.random.default_rng(12)
        for _ in range(20):
            n = int(rng.integers(2, 60))
            a = list(rng.normal(size=n))
            b = list(rng.normal(size=n))
            p = float(rng.uniform(0.05, 1.0))
            assert iou_topp(a, b, p) == iou_topp(b, a, p)
            assert iou_topp(a, a, p) == 1.0

    def test_matches_top_set_oracle(self):
        rng = np.random.default_rng(13)
        for _ in range(30):
            n = int(rng.integers(2, 50))
            a = list(rng.integers(0, 5, size=n).astype(float))  # ties likely
            b = list(rng.integers(0, 5, size=n).astype(float))
            p = float(rng.uniform(0.05, 1.0))
            sa, sb = top_set_oracle(a, p), top_set_oracle(b, p)
            assert iou_topp(a, b, p) == len(sa & sb) / len(sa | sb)

    def test_length_mismatch(self):
        with pytest.raises(LengthMismatchError):
            iou_topp([1.0], [1.0, 2.0], 0.5)


class TestClassifier:
    @pytest.mark.parametrize(
        "token,expected",
        [
            ("therefore", TokenCategory.PLANNING),
            ("Wait", TokenCategory.PLANNING),
            (" however ", TokenCategory.PLANNING),
            ("first", TokenCategory.PLANNING),
            ("verify", TokenCategory.PLANNING),
            ("what", TokenCategory.PLANNING),
            ("3.14", TokenCategory.EXECUTION),
            ("100", TokenCategory.EXECUTION),
            ("+", TokenCategory.EXECUTION),
            ("<=", TokenCategory.EXECUTION),
            ("(", TokenCategory.EXECUTION),
            ("\\frac", TokenCategory.EXECUTION),
            ("x", TokenCategory.EXECUTION),
            ("banana", TokenCategory.UNCLASSIFIED),
            ("", TokenCategory.UNCLASSIFIED),
            ("the", TokenCategory.UNCLASSIFIED),
        ],
    )
    def test_examples(self, token, expected):
        assert classify_token(token) is expected

    def test_planning_checked_before_execution(self):
        # Single letters that are also planning keywords would collide;
        # none exist, but ordering still matters for future vocab bumps.
        assert classify_token("so") is TokenCategory.PLANNING

    def test_totality_and_whitespace_idempotence(self):
        rng = np.random.default_rng(14)
        alphabet = list("abc123+-() \\")
        for _ in range(200):
            s = "".join(rng.choice(alphabet, size=rng.integers(0, 8)))
            cat = classify_token(s)
            assert cat in TokenCategory
            assert classify_token(f"  {s}\t") is cat


class TestEnrichment:
    def _stream(self, n_planning, n_execution, n_noise=0):
        return (
            ["therefore"] * n_planning
            + ["42"] * n_execution
            + ["banana"] * n_noise
        )

    def test_synthetic_counts(self):
        # 2/100 vs 30/100 classifiable-planning -> 15x
        ref = self._stream(2, 98, n_noise=37)
        target = self._stream(30, 70, n_noise=5)
        row = enrichment(ref, target, TokenCategory.PLANNING)
        assert abs(row.global_share - 0.02) <= 1e-12
        assert abs(row.target_share - 0.30) <= 1e-12
        assert abs(row.enrichment - 15.0) <= 1e-12

    def test_reported_shares_ratio(self):
        # Shares of 1.9% vs 33.3% give ~17.5x.
        assert abs(0.333 / 0.019 - 17.526) < 1e-2

    def test_identity_when_equal(self):
        stream = self._stream(5, 45)
        row = enrichment(stream, list(stream), TokenCategory.PLANNING)
        assert row.enrichment == 1.0

    def test_unclassified_excluded(self):
        ref = self._stream(1, 9, n_noise=1000)
        row = enrichment(ref, self._stream(1, 9), TokenCategory.PLANNING)
        assert abs(row.global_share - 0.1) <= 1e-12

    def test_errors(self):
        with pytest.raises(NoClassifiableTokensError):
            enrichment(["banana"], ["42"], TokenCategory.PLANNING)
        with pytest.raises(ZeroGlobalShareError):
            enrichment(["42"], ["therefore"], TokenCategory.PLANNING)

    def test_matches_counting_oracle(self):
        rng = np.random.default_rng(15)
        pool = ["therefore", "so", "42", "+", "x", "banana", "words"]
        for _ in range(20):
            ref = list(rng.choice(pool, size=60))
            target = list(rng.choice(pool, size=40))
            classifiable = lambda toks: [
                classify_token(t) for t in toks if classify_token(t) is not TokenCategory.UNCLASSIFIED
            ]
            ref_c, tgt_c = classifiable(ref), classifiable(target)
            if not ref_c or not tgt_c:
                continue
            g = sum(c is TokenCategory.PLANNING for c in ref_c) / len(ref_c)
            t = sum(c is TokenCategory.PLANNING for c in tgt_c) / len(tgt_c)
            if g == 0:
                continue
            row = enrichment(ref, target, TokenCategory.PLANNING)
            assert abs(row.enrichment - t / g) <= 1e-9


class TestFailurePrediction:
    def test_failure_score_truncation(self):
        trace = make_trace(list(np.linspace(0, 1, 40)))
        assert abs(failure_score(trace, 100) - np.mean(np.linspace(0, 1, 40))) <= 1e-12

    def test_failure_score_top_k(self):
        trace = make_trace([1.0, 5.0, 3.0, 2.0])
        assert failure_score(trace, 2) == 4.0

    def test_failure_score_monotone(self):
        rng = np.random.default_rng(16)
        scores = list(rng.uniform(size=30))
        base = failure_score(make_trace(scores), 10)
        for i in range(0, 30, 7):
            bumped = list(scores)
            bumped[i] += 0.5
            assert failure_score(make_trace(bumped), 10) >= base

    def test_auroc_perfect(self):
        assert auroc([0.9, 0.8, 0.4, 0.3], [1, 1, 0, 0]) == 1.0

    def test_auroc_hand_pairwise(self):
        assert auroc([0.9, 0.2, 0.8, 0.3], [1, 0, 0, 1]) == 0.75

    def test_auroc_matches_pairwise_oracle(self):
        rng = np.random.default_rng(17)
        for _ in range(30):
            n = int(rng.integers(4, 60))
            scores = list(rng.integers(0, 8, size=n).astype(float))  # force ties
            labels = list(rng.integers(0, 2, size=n))
            if len(set(labels)) < 2:
                continue
            assert abs(auroc(scores, labels) - auroc_pairwise_oracle(scores, labels)) <= 1e-9

    def test_auroc_monotone_transform_invariance(self):
        rng = np.random.default_rng(18)
        scores = rng.normal(size=50)
        labels = rng.integers(0, 2, size=50)
        if len(set(labels.tolist())) < 2:
            labels[0] = 1 - labels[0]
        a = auroc(scores, labels)
        assert abs(auroc(np.exp(scores), labels) - a) <= 1e-12
        assert abs(auroc(3 * scores + 7, labels) - a) <= 1e-12

    def test_auroc_complement(self):
        rng = np.random.default_rng(19)
        scores = rng.normal(size=40)  # continuous: no ties
        labels = np.array([0, 1] * 20)
        assert abs(auroc(scores, labels) - (1 - auroc(-scores, labels))) <= 1e-12

    def test_single_class(self):
        with pytest.raises(SingleClassError):
            auroc([0.1, 0.2], [1, 1])

    def test_accuracy_at_threshold_perfect(self):
        acc, thr = accuracy_at_threshold([0.9, 0.8, 0.4, 0.3], [1, 1, 0, 0])
        assert acc == 1.0
        assert thr == 0.8

    def test_accuracy_matches_brute_force(self):
        rng = np.random.default_rng(20)
        for _ in range(20):
            n = int(rng.integers(4, 40))
            scores = rng.integers(0, 6, size=n).astype(float)
            labels = rng.integers(0, 2, size=n)
            if len(set(labels.tolist())) < 2:
                continue
            acc, thr = accuracy_at_threshold(scores, labels)
            best_balanced = -1.0
            for cand in list(np.unique(scores)) + [np.inf]:
                pred = scores >= cand
                tpr = np.sum(pred & (labels == 1)) / np.sum(labels == 1)
                tnr = np.sum(~pred & (labels == 0)) / np.sum(labels == 0)
                best_balanced = max(best_balanced, (tpr + tnr) / 2)
            pred = scores >= thr
            tpr = np.sum(pred & (labels == 1)) / np.sum(labels == 1)
            tnr = np.sum(~pred & (labels == 0)) / np.sum(labels == 0)
            assert abs((tpr + tnr) / 2 - best_balanced) <= 1e-12
            assert acc == np.mean(pred == (labels == 1))


class TestFlips:
    def test_identical(self):
        passes = {"a": True, "b": False, "c": True}
        stats = flip_stats(passes, dict(passes))
        assert (stats.err_to_correct, stats.correct_to_err, stats.unchanged) == (0, 0, 3)

    def test_hand_counting(self):
        base = {"a": False, "b": False, "c": True}
        guided = {"a": True, "b": False, "c": True}
        stats = flip_stats(base, guided)
        assert (stats.err_to_correct, stats.correct_to_err, stats.unchanged) == (1, 0, 2)

    def test_matches_recount_oracle(self):
        rng = np.random.default_rng(21)
        for _ in range(20):
            ids = [f"q{i}" for i in range(int(rng.integers(1, 50)))]
            base = {i: bool(rng.integers(0, 2)) for i in ids}
            guided = {i: bool(rng.integers(0, 2)) for i in ids}
            stats = flip_stats(base, guided)
            e2c = sum(1 for i in ids if not base[i] and guided[i])
            c2e = sum(1 for i in ids if base[i] and not guided[i])
            assert stats.err_to_correct == e2c
            assert stats.correct_to_err == c2e
            assert stats.unchanged == len(ids) - e2c - c2e

    def test_id_mismatch(self):
        with pytest.raises(IdMismatchError):
            flip_stats({"a": True}, {"b": True})


class TestBudget:
    def test_single_trace(self):
        trace = make_trace([1.0] * 10, gates=[True] + [False] * 9)
        summary = budget_summary([trace])
        assert summary.mean_rho == 0.1
        assert summary.std_rho == 0.0

    def test_two_traces(self):
        t1 = make_trace([1.0] * 10, gates=[True] + [False] * 9)
        t2 = make_trace([1.0] * 10, gates=[True] * 3 + [False] * 7, prompt_id="p1")
        summary = budget_summary([t1, t2])
        assert abs(summary.mean_rho - 0.2) <= 1e-12

    def test_matches_recomputation_oracle(self):
        rng = np.random.default_rng(22)
        traces = []
        for i in range(25):
            n = int(rng.integers(1, 40))
            gates = [bool(rng.integers(0, 2)) for _ in range(n)]
            traces.append(make_trace([1.0] * n, gates=gates, prompt_id=f"p{i}"))
        summary = budget_summary(traces)
        rhos = [sum(g for g in (s.gate for s in t.steps)) / len(t.steps) for t in traces]
        assert summary.mean_rho == float(np.mean(rhos))
        assert summary.std_rho == float(np.std(rhos))
        assert [row[2] for row in summary.per_problem] == rhos
        assert all(0.0 <= r <= 1.0 for r in rhos)
