"""BLEU, a smoothed 5-gram language model, and style accuracy."""
from __future__ import annotations

import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError

BOS_TOKEN, EOS_TOKEN, UNK_TOKEN = "<s>", "</s>", "<unk>"
BLEU_NOTE = ("BLEU: up to 4-grams, uniform weights, brevity penalty; add-one smoothing "
             "for zero higher-order matches; unigram precision unsmoothed; orders with "
             "no candidate n-grams dropped and weights renormalized")
LM_NOTE = "LM: order-5 interpolated absolute discounting, d=0.75, uniform floor over vocabulary+unk+eos"


def _ngrams(tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


@dataclass
class BleuStats:
    matches: list[int] = field(default_factory=lambda: [0] * 4)
    totals: list[int] = field(default_factory=lambda: [0] * 4)
    cand_len: int = 0
    ref_len: int = 0

    def add(self, other: BleuStats) -> None:
        for n in range(len(self.matches)):
            self.matches[n] += other.matches[n]
            self.totals[n] += other.totals[n]
        self.cand_len += other.cand_len
        self.ref_len += other.ref_len

    def score(self) -> float:
        if self.cand_len == 0:
            return 0.0
        logs = []
        for n, (m, t) in enumerate(zip(self.matches, self.totals)):
            if t == 0:
                continue
            if m == 0:
                if n == 0:
                    return 0.0
                logs.append(math.log(1.0 / (t + 1)))
            else:
                logs.append(math.log(m / t))
        bp = 1.0 if self.cand_len > self.ref_len else math.exp(1.0 - self.ref_len / self.cand_len)
        return bp * math.exp(sum(logs) / len(logs))


def bleu_stats(candidate, references, max_n: int = 4) -> BleuStats:
    cand = list(candidate)
    refs = [list(r) for r in references]
    if not refs:
        raise DataError("BLEU needs at least one reference")
    st = BleuStats([0] * max_n, [0] * max_n)
    st.cand_len = len(cand)
    # closest reference length, shorter wins ties
    st.ref_len = min((abs(len(r) - len(cand)), len(r)) for r in refs)[1]
    for n in range(1, max_n + 1):
        counts = _ngrams(cand, n)
        best: Counter = Counter()
        for r in refs:
            best |= _ngrams(r, n)
        st.matches[n - 1] = sum(min(c, best[g]) for g, c in counts.items())
        st.totals[n - 1] = max(len(cand) - n + 1, 0)
    return st


def bleu(candidate, references, max_n: int = 4) -> float:
    """Sentence BLEU in [0, 1]; an empty candidate scores 0."""
    return bleu_stats(candidate, references, max_n).score()


def corpus_bleu(candidates, references_list, max_n: int = 4) -> float:
    """BLEU from n-gram counts pooled over the whole corpus."""
    total = BleuStats([0] * max_n, [0] * max_n)
    for cand, refs in zip(candidates, references_list, strict=True):
        total.add(bleu_stats(cand, refs, max_n))
    return total.score()


class NGramLM:
    """Interpolated absolute-discounting n-gram model over whitespace tokens."""

    def __init__(self, order: int = 5, discount: float = 0.75):
        if order < 1 or not 0 < discount < 1:
            raise ConfigError("order must be >= 1 and discount in (0, 1)")
        self.order = order
        self.discount = discount
        self.counts: list[dict[tuple, Counter]] = [defaultdict(Counter) for _ in range(order)]
        self.vocab: set[str] = set()

    def fit(self, sentences) -> NGramLM:
        n_sent = 0
        for sent in sentences:
            toks = list(sent)
            self.vocab.update(toks)
            padded = [BOS_TOKEN] * (self.order - 1) + toks + [EOS_TOKEN]
            for i in range(self.order - 1, len(padded)):
                for n in range(self.order):
                    ctx = tuple(padded[i - n:i])
                    self.counts[n][ctx][padded[i]] += 1
            n_sent += 1
        if n_sent == 0:
            raise DataError("language model needs a nonempty training corpus")
        self.vocab.update((UNK_TOKEN, EOS_TOKEN))
        self._totals = [{c: sum(cnt.values()) for c, cnt in tab.items()} for tab in self.counts]
        return self

    @property
    def support(self) -> list[str]:
        """Every token the model can predict."""
        return sorted(self.vocab)

    def prob(self, word: str, context=()) -> float:
        if word not in self.vocab:
            word = UNK_TOKEN
        ctx = tuple(context)[-(self.order - 1):] if self.order > 1 else ()
        ctx = (BOS_TOKEN,) * (self.order - 1 - len(ctx)) + ctx if self.order > 1 else ()
        p = 1.0 / len(self.vocab)
        for n in range(self.order):
            c = ctx[len(ctx) - n:] if n else ()
            table = self.counts[n].get(c)
            if not table:
                continue
            total = self._totals[n][c]
            d = self.discount
            p = max(table.get(word, 0) - d, 0.0) / total + d * len(table) / total * p
        return p

    def sentence_logprob(self, sent) -> tuple[float, int]:
        toks = [t if t in self.vocab else UNK_TOKEN for t in sent] + [EOS_TOKEN]
        history = [BOS_TOKEN] * (self.order - 1)
        lp = 0.0
        for t in toks:
            lp += math.log(self.prob(t, history))
            history = history[1:] + [t] if self.order > 1 else history
        return lp, len(toks)

    def perplexity(self, sentences) -> float:
        return perplexity(self, sentences)


def train_lm(sentences, order: int = 5, discount: float = 0.75) -> NGramLM:
    return NGramLM(order, discount).fit(sentences)


def perplexity(lm: NGramLM, sentences, skipped: list | None = None) -> float:
    """``exp`` of the mean negative log-probability per predicted token (eos included)."""
    lp, n = 0.0, 0
    for sent in sentences:
        if not sent:
            if skipped is not None:
                skipped.append(sent)
            continue
        s_lp, s_n = lm.sentence_logprob(sent)
        lp += s_lp
        n += s_n
    if n == 0:
        raise DataError("no nonempty sentences to score")
    return math.exp(-lp / n)


def style_accuracy(predicted, targets) -> float:
    predicted, targets = np.asarray(predicted), np.asarray(targets)
    if len(targets) == 0:
        raise DataError("cannot compute style accuracy of zero outputs")
    return float((predicted == targets).mean())
