"""Oracle and property tests for sources, corpora, and their file formats."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from distill_lab.data import (
    BIMODAL_EPS,
    BIMODAL_VOCAB,
    CHOOSER_TOKEN,
    COIN_A,
    COIN_B,
    GAP_TOKEN,
    MODE_X,
    MODE_Y,
    Corpus,
    bimodal_ambiguous_mixture,
    build_source,
    corpus_read,
    corpus_write,
    generate_seqkd_corpus,
    sample_corpus,
    source_load,
    source_save,
)
from distill_lab.errors import ConfigError, InvalidInputError, ParseError
from distill_lab.model import TabularLM, Vocab
from distill_lab.numerics import entropy
from distill_lab.training import train_teacher_mle


class TestBuildSource:
    def test_uniform_rows(self):
        src = build_source({"name": "uniform", "vocab_size": 4, "order": 1})
        for ctx in [(0,), (1,), (2,), (3,)]:
            assert np.allclose(src.conditional(ctx).probs, [0.25] * 4)

    def test_deterministic_cycle(self):
        src = build_source({"name": "deterministic_cycle", "vocab_size": 3})
        for i in range(3):
            d = src.conditional((i,))
            assert d.probs[(i + 1) % 3] == 1.0
            assert entropy(d) == 0.0

    def test_random_dirichlet_needs_seed(self):
        with pytest.raises(ConfigError):
            build_source({"name": "random_dirichlet"})

    def test_random_dirichlet_deterministic(self):
        a = build_source({"name": "random_dirichlet", "seed": 3, "vocab_size": 4})
        b = build_source({"name": "random_dirichlet", "seed": 3, "vocab_size": 4})
        for ctx in a.table:
            assert np.array_equal(a.table[ctx].probs, b.table[ctx].probs)

    def test_unknown_name_and_keys(self):
        with pytest.raises(ConfigError):
            build_source({"name": "nope"})
        with pytest.raises(ConfigError):
            build_source({"name": "uniform", "bogus": 1})
        with pytest.raises(ConfigError):
            build_source({})


class TestBimodalGap:
    def test_fixed_shape(self):
        src = build_source({"name": "bimodal_gap"})
        assert src.order == 2 and src.vocab.size == BIMODAL_VOCAB
        assert len(src.table) == BIMODAL_VOCAB**2
        with pytest.raises(ConfigError):
            build_source({"name": "bimodal_gap", "vocab_size": 4})
        with pytest.raises(ConfigError):
            build_source({"name": "bimodal_gap", "eps": 0.0})

    def test_cycle_structure(self):
        src = build_source({"name": "bimodal_gap"})
        # chooser -> coin, coin -> gap, gap -> mode resolved by the coin
        d = src.conditional((GAP_TOKEN, CHOOSER_TOKEN))
        assert d.probs[COIN_A] == pytest.approx(d.probs[COIN_B])
        assert d.probs[COIN_A] > 0.4
        assert np.argmax(src.conditional((CHOOSER_TOKEN, COIN_A)).probs) == GAP_TOKEN
        assert np.argmax(src.conditional((COIN_A, GAP_TOKEN)).probs) == MODE_X
        assert np.argmax(src.conditional((COIN_B, GAP_TOKEN)).probs) == MODE_Y
        assert np.argmax(src.conditional((GAP_TOKEN, MODE_X)).probs) == CHOOSER_TOKEN

    def test_rows_are_smoothed_full_support(self):
        src = build_source({"name": "bimodal_gap", "eps": 0.1})
        for d in src.table.values():
            assert np.all(d.probs >= 0.1 / BIMODAL_VOCAB - 1e-12)

    def test_ambiguous_mixture_is_exact_average(self):
        src = build_source({"name": "bimodal_gap"})
        mix = bimodal_ambiguous_mixture(BIMODAL_EPS)
        a = src.conditional((COIN_A, GAP_TOKEN)).probs
        b = src.conditional((COIN_B, GAP_TOKEN)).probs
        assert np.allclose(mix.probs, 0.5 * (a + b))
        assert mix.probs[MODE_X] == pytest.approx(mix.probs[MODE_Y])

    def test_non_coin_history_rows_equal_mixture(self):
        # contexts (x, gap) with x not a coin carry the exact 50/50 mixture,
        # which is what makes the order-1 marginal at the gap state exact
        src = build_source({"name": "bimodal_gap"})
        mix = bimodal_ambiguous_mixture(BIMODAL_EPS).probs
        for x in (GAP_TOKEN, CHOOSER_TOKEN, MODE_X, MODE_Y):
            assert np.allclose(src.conditional((x, GAP_TOKEN)).probs, mix)

    def test_swap_symmetry(self):
        # joint relabeling 1<->2, 4<->5 maps the table onto itself
        src = build_source({"name": "bimodal_gap"})
        swap = {COIN_A: COIN_B, COIN_B: COIN_A, MODE_X: MODE_Y, MODE_Y: MODE_X}
        perm = np.array([swap.get(v, v) for v in range(BIMODAL_VOCAB)])
        for ctx, d in src.table.items():
            mapped = (swap.get(ctx[0], ctx[0]), swap.get(ctx[1], ctx[1]))
            assert np.allclose(src.table[mapped].probs[perm], d.probs)


class TestSampleSequences:
    def test_cycle_sequences_follow_cycle(self):
        src = build_source({"name": "deterministic_cycle", "vocab_size": 3})
        seq = src.sample_sequence(9, np.random.default_rng(0))
        assert seq == [1, 2, 0, 1, 2, 0, 1, 2, 0]

    def test_uniform_frequencies_three_sigma(self):
        src = build_source({"name": "uniform", "vocab_size": 2, "order": 1})
        rng = np.random.default_rng(5)
        toks = src.sample_sequence(100_000, rng)
        freq = toks.count(0) / len(toks)
        sigma = np.sqrt(0.25 / 100_000)
        assert abs(freq - 0.5) <= 3 * sigma

    def test_fixed_seed_identical_corpus(self):
        src = build_source({"name": "bimodal_gap"})
        a = sample_corpus(src, 10, 20, np.random.default_rng(4), seed=4)
        b = sample_corpus(src, 10, 20, np.random.default_rng(4), seed=4)
        assert a.sequences == b.sequences
        assert a.provenance == "ground_truth"

    def test_bad_sizes(self):
        src = build_source({"name": "uniform"})
        with pytest.raises(InvalidInputError):
            sample_corpus(src, 0, 5, np.random.default_rng(0))


class TestSeqKDCorpus:
    def _fit_teacher(self, src, seed=0):
        corpus = sample_corpus(src, 500, 64, np.random.default_rng(seed), seed=seed)
        return train_teacher_mle(corpus, src.order, lam=0.0)

    def test_greedy_limit_single_repeated_sequence(self):
        src = build_source({"name": "deterministic_cycle", "vocab_size": 3})
        teacher = self._fit_teacher(src)
        corpus = generate_seqkd_corpus(
            teacher, [[] for _ in range(5)], 6, np.random.default_rng(0), temperature=0.0
        )
        assert all(seq == corpus.sequences[0] for seq in corpus.sequences)
        assert corpus.provenance == "teacher_generated"

    def test_temperature_one_matches_source_statistics(self):
        src = build_source({"name": "random_dirichlet", "seed": 9, "vocab_size": 4,
                            "order": 1})
        teacher = TabularLM(order=1, vocab=Vocab.default(4))
        for ctx, d in src.table.items():
            teacher.set_row(ctx, np.log(d.probs))
        n = 100_000
        rng = np.random.default_rng(1)
        kd = generate_seqkd_corpus(teacher, [[]], n, rng, temperature=1.0)
        gt = sample_corpus(src, 1, n, np.random.default_rng(2))
        for v in range(4):
            f1 = kd.sequences[0].count(v) / n
            f2 = gt.sequences[0].count(v) / n
            # both are unigram frequencies of the same chain; 3 sigma each way
            assert abs(f1 - f2) <= 6 * np.sqrt(0.25 / n)

    def test_negative_temperature_rejected(self):
        teacher = TabularLM(order=1, vocab=Vocab.default(2))
        with pytest.raises(InvalidInputError):
            generate_seqkd_corpus(teacher, [[]], 4, np.random.default_rng(0),
                                  temperature=-1.0)


class TestCorpusIO:
    def test_round_trip(self, tmp_path):
        src = build_source({"name": "bimodal_gap"})
        corpus = sample_corpus(src, 8, 12, np.random.default_rng(0), seed=0)
        path = tmp_path / "c.txt"
        corpus_write(corpus, path)
        loaded = corpus_read(path)
        assert loaded.sequences == corpus.sequences
        assert loaded.provenance == corpus.provenance
        assert loaded.seed == corpus.seed
        assert loaded.vocab_size == corpus.vocab_size

    def test_empty_corpus_round_trips(self, tmp_path):
        corpus = Corpus(sequences=[], provenance="ground_truth", seed=1, vocab_size=4)
        path = tmp_path / "c.txt"
        corpus_write(corpus, path)
        assert corpus_read(path).sequences == []

    def test_out_of_range_token_names_line(self, tmp_path):
        path = tmp_path / "c.txt"
        path.write_text(
            '{"format_version": 1, "V": 4, "provenance": "ground_truth", "seed": 0}\n'
            "0 1 2\n"
            "0 9 1\n"
        )
        with pytest.raises(ParseError, match="line 3"):
            corpus_read(path)

    def test_non_integer_token_names_line(self, tmp_path):
        path = tmp_path / "c.txt"
        path.write_text(
            '{"format_version": 1, "V": 2, "provenance": "ground_truth", "seed": 0}\n'
            "0 x\n"
        )
        with pytest.raises(ParseError, match="line 2"):
            corpus_read(path)

    def test_missing_header(self, tmp_path):
        path = tmp_path / "c.txt"
        path.write_text("0 1 0\n")
        with pytest.raises(ParseError):
            corpus_read(path)

    def test_bad_provenance_rejected(self):
        with pytest.raises(InvalidInputError):
            Corpus(sequences=[], provenance="mystery", seed=0, vocab_size=2)


class TestSourceIO:
    def test_round_trip(self, tmp_path):
        src = build_source({"name": "random_dirichlet", "seed": 2, "vocab_size": 3,
                            "order": 2})
        path = tmp_path / "s.json"
        source_save(src, path)
        loaded = source_load(path)
        assert loaded.name == src.name and loaded.order == src.order
        assert set(loaded.table) == set(src.table)
        for ctx in src.table:
            assert np.allclose(loaded.table[ctx].probs, src.table[ctx].probs)

    def test_corrupt_file(self, tmp_path):
        path = tmp_path / "s.json"
        path.write_text("{not json")
        with pytest.raises(ParseError):
            source_load(path)


@settings(max_examples=20)
@given(st.floats(0.01, 0.99))
def test_property_smoothed_rows_are_distributions(eps):
    src = build_source({"name": "bimodal_gap", "eps": eps})
    for d in src.table.values():
        assert d.probs.sum() == pytest.approx(1.0)
        assert np.all(d.probs > 0.0)
