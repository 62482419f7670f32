import math

import numpy as np
import pytest

from sflow.data import generate_synthetic_corpus, make_batch
from sflow.errors import ConfigError, DataError
from sflow.metrics import (NGramLM, bleu, bleu_stats, corpus_bleu, perplexity, style_accuracy,
                           train_lm)

from oracles import bleu_by_hand

# (1/3 * 1/3 * 1/2) ** (1/3): clipped unigrams 1/3, smoothed bigrams 1/3, smoothed trigram 1/2
THE_THE_THE = 0.38157141418444


class TestBleu:
    def test_identity(self):
        s = "the food was great and cheap".split()
        assert bleu(s, [s]) == pytest.approx(1.0, abs=1e-12)

    def test_hand_example(self):
        got = bleu("the the the".split(), ["the cat sat".split()])
        assert abs(got - THE_THE_THE) < 1e-9
        assert abs(got - bleu_by_hand("the the the".split(), "the cat sat".split())) < 1e-9
        assert abs(THE_THE_THE - (1 / 18) ** (1 / 3)) < 1e-12

    def test_clipped_unigram_precision(self):
        st = bleu_stats("the the the".split(), ["the cat sat".split()])
        assert st.matches[0] / st.totals[0] == pytest.approx(1 / 3)

    def test_disjoint_is_zero(self):
        assert bleu("a b c".split(), ["x y z".split()]) == 0.0

    def test_empty_candidate(self):
        assert bleu([], ["a b".split()]) == 0.0

    def test_no_reference(self):
        with pytest.raises(DataError):
            bleu(["a"], [])

    def test_matches_loop_oracle(self, rng):
        words = list("abcdefg")
        for _ in range(200):
            cand = list(rng.choice(words, size=rng.integers(1, 9)))
            ref = list(rng.choice(words, size=rng.integers(1, 9)))
            assert abs(bleu(cand, [ref]) - bleu_by_hand(cand, ref)) < 1e-12

    def test_brevity_penalty(self):
        ref = "a b c d e f g h".split()
        assert bleu(ref[:4], [ref]) == pytest.approx(math.exp(1 - 8 / 4))

    def test_corpus_pools_counts(self):
        cands = ["a b c d".split(), "x y".split()]
        refs = [["a b c d".split()], ["x z".split()]]
        # unigrams 5/6, bigrams 3/4, trigrams 2/2, 4-grams 1/1
        expected = (5 / 6 * 3 / 4) ** 0.25
        assert corpus_bleu(cands, refs) == pytest.approx(expected, abs=1e-12)


@pytest.fixture(scope="module")
def lm():
    return train_lm(generate_synthetic_corpus(0, 300, 80).sentences())


class TestLanguageModel:
    def test_normalized_per_context(self, lm):
        rng = np.random.default_rng(0)
        sents = generate_synthetic_corpus(5, 20, 80).sentences()
        for _ in range(40):
            s = sents[rng.integers(len(sents))]
            cut = int(rng.integers(0, len(s) + 1))
            ctx = s[:cut]
            total = sum(lm.prob(w, ctx) for w in lm.support)
            assert abs(total - 1.0) < 1e-9

    def test_unseen_context_normalized(self, lm):
        assert abs(sum(lm.prob(w, ["zz", "yy", "xx", "ww"]) for w in lm.support) - 1) < 1e-9

    def test_degenerate_corpus(self):
        sent = "the food was great".split()
        lm = train_lm([sent] * 50)
        assert perplexity(lm, [sent]) < 1.2

    def test_shuffled_is_worse(self, lm):
        sents = generate_synthetic_corpus(6, 100, 80).sentences()
        rng = np.random.default_rng(1)
        shuffled = [list(rng.permutation(s)) for s in sents]
        assert perplexity(lm, sents) < perplexity(lm, shuffled)

    def test_unknown_tokens_finite(self, lm):
        assert math.isfinite(perplexity(lm, [["qqq", "zzz"]]))

    def test_empty_sentences_skipped(self, lm):
        skipped = []
        value = perplexity(lm, [[], ["the", "food"]], skipped)
        assert len(skipped) == 1 and math.isfinite(value)
        with pytest.raises(DataError):
            perplexity(lm, [[]])

    def test_bad_order(self):
        with pytest.raises(ConfigError):
            NGramLM(order=0)

    def test_empty_training_corpus(self):
        with pytest.raises(DataError):
            train_lm([])


class TestStyleAccuracy:
    def test_empty_is_error(self):
        with pytest.raises(DataError):
            style_accuracy([], [])

    def test_value(self):
        assert style_accuracy([1, 0, 1, 1], [1, 1, 1, 0]) == 0.5

    def test_target_side_copies_score_high(self, trained_scorer, heldout_corpus):
        scorer, report = trained_scorer
        # outputs taken verbatim from target-style data
        by_style = {s: [r for r in heldout_corpus.rows if r.label == s] for s in (0, 1)}
        outs = [by_style[1 - r.label][i % 100] for i, r in enumerate(heldout_corpus.rows)]
        b = make_batch(outs)
        targets = [1 - r.label for r in heldout_corpus.rows]
        assert style_accuracy(scorer.predict(b.ids, b.nonpad), targets) >= report.heldout_accuracy - 1e-12

    def test_unchanged_sources_score_complement(self, trained_scorer, heldout_corpus):
        scorer, _ = trained_scorer
        b = make_batch(heldout_corpus.rows)
        pred = scorer.predict(b.ids, b.nonpad)
        clf_acc = style_accuracy(pred, b.labels)
        assert style_accuracy(pred, 1 - b.labels) == pytest.approx(1 - clf_acc, abs=1e-12)
