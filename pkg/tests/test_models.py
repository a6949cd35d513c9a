"""Backend semantics: table suffix matching and file round-trips, n-gram
smoothed counts, sampler exactness, and the remote client against a
wire-protocol stub."""

import numpy as np
import pytest
from scipy.stats import chisquare

from forkdecode.distributions import TokenDistribution, Vocab
from forkdecode.errors import (
    EmptyCorpusError,
    ParseError,
    RemoteUnavailableError,
    UnknownContextError,
    VocabMismatchError,
)
from forkdecode.models import (
    RemoteModel,
    SamplerConfig,
    TableModel,
    check_shared_vocab,
    effective_sampling_probs,
    ngram_corpus_load,
    ngram_fit,
    sample,
    table_model_load,
)


class TestTableModel:
    def test_exact_row_lookup(self):
        row = [0.9, 0.1] + [0.0] * 6
        model = TableModel(Vocab(8), {(7,): row}, default=np.full(8, 0.125))
        np.testing.assert_allclose(model.next_distribution((7,)).probs(), row, atol=1e-9)

    def test_longest_suffix_wins(self):
        model = TableModel(
            Vocab(2),
            {(1,): [0.9, 0.1], (0, 1): [0.2, 0.8]},
            default=np.array([0.5, 0.5]),
        )
        np.testing.assert_allclose(model.next_distribution((0, 1)).probs(), [0.2, 0.8], atol=1e-9)
        np.testing.assert_allclose(model.next_distribution((1, 1)).probs(), [0.9, 0.1], atol=1e-9)

    def test_default_row_fallback(self):
        model = TableModel(Vocab(2), {(1,): [0.9, 0.1]}, default=np.array([0.25, 0.75]))
        np.testing.assert_allclose(model.next_distribution((0,)).probs(), [0.25, 0.75], atol=1e-9)

    def test_unknown_context_without_default(self):
        model = TableModel(Vocab(2), {(1,): [0.9, 0.1]}, default=None)
        with pytest.raises(UnknownContextError):
            model.next_distribution((0,))

    def test_determinism(self):
        model = TableModel(Vocab(2), {(1,): [0.6, 0.4]}, default=np.array([0.5, 0.5]))
        a = model.next_distribution((1,)).log_probs
        b = model.next_distribution((1,)).log_probs
        np.testing.assert_array_equal(a, b)


class TestTableFile:
    def test_round_trip(self, tmp_path):
        model = TableModel(
            Vocab(3),
            {(0,): [0.2, 0.3, 0.5], (1, 2): [0.0, 1.0, 0.0]},
            default=np.array([1 / 3, 1 / 3, 1 / 3]),
            name="m",
        )
        path = tmp_path / "m.table"
        model.save(path)
        loaded = table_model_load(path)
        for ctx in [(0,), (1, 2), (2,), (0, 1, 2)]:
            np.testing.assert_array_equal(
                model.next_distribution(ctx).log_probs,
                loaded.next_distribution(ctx).log_probs,
            )

    def test_empty_rows_is_parse_error(self, tmp_path):
        path = tmp_path / "empty.table"
        path.write_text("vocab 2\n")
        with pytest.raises(ParseError):
            table_model_load(path)

    def test_bad_header(self, tmp_path):
        path = tmp_path / "bad.table"
        path.write_text("vocabulary 2\nrow * : 0.5 0.5\n")
        with pytest.raises(ParseError):
            table_model_load(path)

    def test_row_must_sum_to_one(self, tmp_path):
        path = tmp_path / "sum.table"
        path.write_text("vocab 2\nrow * : 0.5 0.6\n")
        with pytest.raises(ParseError):
            table_model_load(path)

    def test_wrong_prob_count(self, tmp_path):
        path = tmp_path / "count.table"
        path.write_text("vocab 3\nrow * : 0.5 0.5\n")
        with pytest.raises(ParseError):
            table_model_load(path)

    def test_parses_documented_format(self, tmp_path):
        path = tmp_path / "doc.table"
        path.write_text("vocab 2\nrow 1 : 0.9 0.1\nrow 0 1 : 0.2 0.8\nrow * : 0.5 0.5\n")
        model = table_model_load(path)
        np.testing.assert_allclose(model.next_distribution((0, 1)).probs(), [0.2, 0.8], atol=1e-9)


class TestNgram:
    def test_unigram_add_one_hand_count(self):
        # corpus "aab" over {a, b}: P(a) = (2+1)/(3+2) = 0.6
        model = ngram_fit([[0, 0, 1]], n=1, alpha=1.0, vocab=Vocab(2))
        np.testing.assert_allclose(model.next_distribution((0,)).probs(), [0.6, 0.4], atol=1e-9)

    def test_bigram_hand_count(self):
        # corpus "ab ab": P(b|a) = (2+1)/(2+2) = 0.75
        model = ngram_fit([[0, 1], [0, 1]], n=2, alpha=1.0, vocab=Vocab(2))
        np.testing.assert_allclose(
            model.next_distribution((0,)).probs(), [0.25, 0.75], atol=1e-9
        )

    def test_unseen_context_is_uniform(self):
        model = ngram_fit([[0, 1], [0, 1]], n=2, alpha=1.0, vocab=Vocab(2))
        np.testing.assert_allclose(model.next_distribution((1,)).probs(), [0.5, 0.5], atol=1e-9)

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(0)
        corpus = [list(rng.integers(0, 5, size=30)) for _ in range(10)]
        model = ngram_fit(corpus, n=3, alpha=0.5, vocab=Vocab(5))
        for _ in range(20):
            ctx = list(rng.integers(0, 5, size=4))
            assert abs(model.next_distribution(ctx).probs().sum() - 1.0) < 1e-9

    def test_empty_corpus(self):
        with pytest.raises(EmptyCorpusError):
            ngram_fit([], n=1, alpha=1.0, vocab=Vocab(2))
        with pytest.raises(EmptyCorpusError):
            ngram_fit([[]], n=1, alpha=1.0, vocab=Vocab(2))

    def test_corpus_file(self, tmp_path):
        path = tmp_path / "corpus.txt"
        path.write_text("vocab 3\n0 1 2\n2 1 0\n")
        corpus, vocab = ngram_corpus_load(path)
        assert corpus == [[0, 1, 2], [2, 1, 0]]
        assert vocab.size == 3


class TestSampler:
    def test_one_hot_always_returns_hot_token(self):
        dist = TokenDistribution.from_probs([0.0, 1.0, 0.0], Vocab(3))
        rng = np.random.default_rng(0)
        cfg = SamplerConfig(temperature=0.6, top_p=0.95)
        assert all(sample(dist, cfg, rng) == 1 for _ in range(100))

    def test_nucleus_boundary_uniform4(self):
        dist = TokenDistribution.from_probs([0.25] * 4, Vocab(4))
        rng = np.random.default_rng(0)
        cfg = SamplerConfig(temperature=1.0, top_p=0.25)
        # Ties break by ascending id; the first token alone crosses the mass boundary.
        assert all(sample(dist, cfg, rng) == 0 for _ in range(200))

    def test_monte_carlo_frequency(self):
        dist = TokenDistribution.from_probs([0.75, 0.25], Vocab(2))
        rng = np.random.default_rng(99)
        cfg = SamplerConfig(temperature=1.0, top_p=1.0)
        n = 100_000
        hits = sum(sample(dist, cfg, rng) == 0 for _ in range(n))
        assert abs(hits / n - 0.75) < 0.01

    def test_chi_square_exactness_8way(self):
        probs = np.array([0.30, 0.20, 0.15, 0.12, 0.10, 0.06, 0.04, 0.03])
        dist = TokenDistribution.from_probs(probs, Vocab(8))
        rng = np.random.default_rng(1234)
        cfg = SamplerConfig(temperature=1.0, top_p=1.0)
        n = 100_000
        counts = np.zeros(8)
        for _ in range(n):
            counts[sample(dist, cfg, rng)] += 1
        _, p_value = chisquare(counts, probs * n)
        assert p_value > 0.001

    def test_temperature_sharpens(self):
        dist = TokenDistribution.from_probs([0.6, 0.4], Vocab(2))
        cfg = SamplerConfig(temperature=0.5, top_p=1.0)
        eff = effective_sampling_probs(dist, cfg)
        # 0.6^2 / (0.6^2 + 0.4^2) = 0.692...
        np.testing.assert_allclose(eff, [0.36 / 0.52, 0.16 / 0.52], atol=1e-9)

    def test_effective_probs_nucleus_truncation(self):
        dist = TokenDistribution.from_probs([0.96, 0.04], Vocab(2))
        cfg = SamplerConfig(temperature=1.0, top_p=0.95)
        eff = effective_sampling_probs(dist, cfg)
        np.testing.assert_allclose(eff, [1.0, 0.0], atol=1e-12)

    def test_seeded_determinism(self):
        dist = TokenDistribution.from_probs([0.5, 0.3, 0.2], Vocab(3))
        cfg = SamplerConfig()
        draws1 = [sample(dist, cfg, np.random.default_rng(5)) for _ in range(1)]
        a = np.random.default_rng(5)
        b = np.random.default_rng(5)
        assert [sample(dist, cfg, a) for _ in range(50)] == [
            sample(dist, cfg, b) for _ in range(50)
        ]

    def test_config_validation(self):
        with pytest.raises(ValueError):
            SamplerConfig(temperature=0.0)
        with pytest.raises(ValueError):
            SamplerConfig(top_p=0.0)
        with pytest.raises(ValueError):
            SamplerConfig(top_p=1.5)
        with pytest.raises(ValueError):
            SamplerConfig(max_len=0)


class TestRemoteModel:
    ROWS = {(1,): [0.9, 0.1]}
    DEFAULT = [0.75, 0.25]

    def test_model_info(self, stub_server):
        url = stub_server(self.ROWS, self.DEFAULT, 2, name="toy")
        model = RemoteModel(url)
        assert model.name == "toy"
        assert model.vocab.size == 2

    def test_round_trip_matches_local_table(self, stub_server):
        url = stub_server(self.ROWS, self.DEFAULT, 2)
        remote = RemoteModel(url)
        local = TableModel(Vocab(2), self.ROWS, np.array(self.DEFAULT))
        for ctx in [(1,), (0,), (0, 1), (1, 0)]:
            np.testing.assert_allclose(
                remote.next_distribution(ctx).log_probs,
                local.next_distribution(ctx).log_probs,
                atol=1e-6,
            )

    def test_unreachable_server(self):
        with pytest.raises(RemoteUnavailableError):
            RemoteModel("http://127.0.0.1:1", timeout=0.5)

    def test_rejects_out_of_range_token(self, stub_server):
        url = stub_server(self.ROWS, self.DEFAULT, 2)
        model = RemoteModel(url)
        with pytest.raises(ValueError):
            model.next_distribution((99,))

    def test_protocol_error_on_bad_vector_length(self, stub_server):
        url = stub_server(self.ROWS, self.DEFAULT, 2)
        model = RemoteModel(url)
        # Lie about the vocab so the next response length mismatches.
        model.vocab = Vocab(3)
        with pytest.raises(VocabMismatchError):
            model.next_distribution((1,))

    def test_pairing_requires_shared_vocab(self, stub_server):
        url = stub_server(self.ROWS, self.DEFAULT, 2)
        remote = RemoteModel(url)
        other = TableModel(Vocab(3), {}, np.array([1 / 3] * 3))
        with pytest.raises(VocabMismatchError):
            check_shared_vocab(remote, other)


class TestDeterminismInvariant:
    def test_repeat_queries_identical(self):
        rng = np.random.default_rng(2)
        corpus = [list(rng.integers(0, 8, size=50)) for _ in range(5)]
        ngram = ngram_fit(corpus, n=2, alpha=1.0, vocab=Vocab(8))
        table = TableModel(Vocab(8), {(1,): [0.3] + [0.1] * 7}, np.full(8, 0.125))
        for model in (ngram, table):
            for _ in range(5):
                ctx = list(rng.integers(0, 8, size=6))
                a = model.next_distribution(ctx).log_probs
                b = model.next_distribution(ctx).log_probs
                assert np.max(np.abs(a - b)) <= 1e-12
