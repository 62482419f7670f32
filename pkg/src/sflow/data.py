"""Corpus ingestion, vocabulary, batching and the synthetic sentiment corpus."""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, VocabularyError

PAD, UNK, BOS, EOS = 0, 1, 2, 3
RESERVED = ("<pad>", "<unk>", "<bos>", "<eos>")
STYLE_NAMES = ("negative", "positive")
_LABEL_ALIASES = {"0": 0, "1": 1, "negative": 0, "positive": 1, "neg": 0, "pos": 1}


class Vocabulary:
    """Bijection between tokens and ids; ids 0-3 are reserved."""

    def __init__(self, tokens=()):
        self.itos: list[str] = list(RESERVED)
        self.stoi: dict[str, int] = {t: i for i, t in enumerate(self.itos)}
        for tok in tokens:
            self.add(tok)

    def add(self, token: str) -> int:
        if token in self.stoi:
            return self.stoi[token]
        self.stoi[token] = len(self.itos)
        self.itos.append(token)
        return self.stoi[token]

    def __len__(self):
        return len(self.itos)

    def __contains__(self, token):
        return token in self.stoi

    def encode(self, tokens, add_markers: bool = True) -> np.ndarray:
        ids = [self.stoi.get(t, UNK) for t in tokens]
        if add_markers:
            ids = [BOS] + ids + [EOS]
        return np.array(ids, dtype=np.int64)

    def decode(self, ids, strip: bool = True) -> list[str]:
        out = []
        for i in np.asarray(ids).tolist():
            if not 0 <= i < len(self.itos):
                raise VocabularyError(f"token id {i} outside vocabulary of size {len(self.itos)}")
            if strip and i in (PAD, BOS, EOS):
                continue
            out.append(self.itos[i])
        return out

    def detokenize(self, ids) -> str:
        return " ".join(self.decode(ids))

    def tokens(self) -> list[str]:
        return list(self.itos)

    @classmethod
    def from_tokens(cls, itos: list[str]) -> Vocabulary:
        if tuple(itos[:len(RESERVED)]) != RESERVED:
            raise DataError("vocabulary does not start with the reserved tokens")
        v = cls()
        for tok in itos[len(RESERVED):]:
            v.add(tok)
        if len(v) != len(itos):
            raise DataError("vocabulary contains duplicate tokens")
        return v


@dataclass
class TokenSequence:
    ids: np.ndarray
    label: int

    def __len__(self):
        return len(self.ids)


@dataclass
class Batch:
    ids: np.ndarray       # (B, L) int, right-padded with PAD
    nonpad: np.ndarray    # (B, L) bool
    labels: np.ndarray    # (B,) int

    @property
    def size(self) -> int:
        return self.ids.shape[0]


def make_batch(seqs: list[TokenSequence]) -> Batch:
    L = max(len(s) for s in seqs)
    ids = np.full((len(seqs), L), PAD, dtype=np.int64)
    nonpad = np.zeros((len(seqs), L), dtype=bool)
    for i, s in enumerate(seqs):
        ids[i, :len(s)] = s.ids
        nonpad[i, :len(s)] = True
    return Batch(ids, nonpad, np.array([s.label for s in seqs], dtype=np.int64))


@dataclass
class Corpus:
    rows: list[TokenSequence]
    vocab: Vocabulary
    styles: tuple[str, ...] = STYLE_NAMES
    skipped: int = 0

    def __len__(self):
        return len(self.rows)

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    def counts(self) -> dict[str, int]:
        c = Counter(r.label for r in self.rows)
        return {name: c.get(i, 0) for i, name in enumerate(self.styles)}

    def batch(self, indices) -> Batch:
        return make_batch([self.rows[i] for i in np.asarray(indices).tolist()])

    def sentences(self) -> list[list[str]]:
        return [self.vocab.decode(r.ids) for r in self.rows]

    def subset(self, indices) -> Corpus:
        return Corpus([self.rows[i] for i in indices], self.vocab, self.styles)


def parse_label(text: str, lineno: int | None = None) -> int:
    try:
        return _LABEL_ALIASES[text.strip().lower()]
    except KeyError:
        where = f"line {lineno}: " if lineno is not None else ""
        raise DataError(f"{where}unknown style label {text!r}") from None


def read_tsv(path, lowercase: bool = True) -> list[tuple[int, list[str]]]:
    """Parse ``label<TAB>sentence`` lines into (label, tokens) pairs."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except UnicodeDecodeError as e:
        raise DataError(f"{path}: not valid UTF-8 ({e})") from None
    rows = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        if "\t" not in line:
            raise DataError(f"{path}: line {lineno}: expected label<TAB>sentence")
        label, sentence = line.split("\t", 1)
        if lowercase:
            sentence = sentence.lower()
        rows.append((parse_label(label, lineno), sentence.split()))
    if not rows:
        raise DataError(f"{path}: empty corpus")
    return rows


def load_corpus(path, vocab: Vocabulary | None = None, lowercase: bool = True,
                min_count: int = 1) -> Corpus:
    """Read a TSV corpus; builds a vocabulary unless one is given."""
    rows = read_tsv(path, lowercase)
    if vocab is None:
        counts = Counter(tok for _, toks in rows for tok in toks)
        vocab = Vocabulary(sorted(t for t, c in counts.items() if c >= min_count))
    seqs, skipped = [], 0
    for label, toks in rows:
        if not toks:
            skipped += 1
            continue
        seqs.append(TokenSequence(vocab.encode(toks), label))
    return Corpus(seqs, vocab, skipped=skipped)


def write_corpus(path, corpus: Corpus) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for row in corpus.rows:
            f.write(f"{row.label}\t{corpus.vocab.detokenize(row.ids)}\n")


def encode_sentences(sentences: list[str], labels, vocab: Vocabulary, lowercase: bool = True) -> Corpus:
    rows = []
    for s, label in zip(sentences, labels):
        toks = (s.lower() if lowercase else s).split()
        rows.append(TokenSequence(vocab.encode(toks), int(label)))
    return Corpus(rows, vocab)


# --- synthetic corpus -----------------------------------------------------------

_POSITIVE = ["great", "delicious", "excellent", "wonderful", "amazing", "fantastic", "lovely",
             "superb", "friendly", "perfect", "tasty", "awesome", "pleasant", "fresh", "brilliant",
             "outstanding", "splendid", "charming", "gorgeous", "terrific", "fabulous", "marvelous",
             "delightful", "stellar", "impressive", "flawless", "cheerful", "generous"]
_NEGATIVE = ["awful", "terrible", "horrible", "disgusting", "bland", "rude", "dirty", "stale",
             "greasy", "mediocre", "dreadful", "lousy", "nasty", "gross", "soggy", "boring",
             "overpriced", "unpleasant", "filthy", "sloppy", "pathetic", "miserable", "shabby",
             "inedible", "noisy", "careless", "disappointing", "appalling"]
_NOUNS = ["food", "service", "staff", "pizza", "waiter", "burger", "salad", "coffee", "room",
          "menu", "steak", "soup", "bread", "pasta", "owner", "bartender", "dessert", "table",
          "place", "sushi", "hotel", "lobby", "music", "drinks", "chicken", "rice", "fries",
          "sandwich", "manager", "patio", "noodles", "tacos", "cake", "tea", "wine", "beer",
          "breakfast", "lunch", "dinner", "kitchen", "parking", "bathroom", "counter", "booth",
          "cashier", "chef", "host", "portion", "sauce", "crust"]
_VERBS = ["arrived", "came", "left", "opened", "closed", "waited", "stayed", "returned",
          "ordered", "sat", "paid", "walked", "talked", "looked", "moved", "cooked", "served",
          "cleaned", "called", "changed", "started", "finished", "stopped", "smiled"]
_ADVERBS = ["today", "yesterday", "late", "early", "again", "quickly", "slowly", "later",
            "twice", "outside", "inside", "downstairs", "upstairs", "nearby", "recently", "once"]
_FUNCTION = ["the", "was", "and", "we", "it", "but", "then", "our", "my", "i", "they", "so",
             "were", "also", "really", "very"]

_TEMPLATES = [
    "the {n} was {p}",
    "the {n} was {p} and the {n2} {v} {a}",
    "the {n2} {v} {a} but the {n} was {p}",
    "we {v} {a} and the {n} was really {p}",
    "our {n} was {p} so we {v} {a}",
    "i {v} {a} and it was very {p}",
    "the {n} {v} {a} and the {n2} was {p}",
    "my {n} was {p} and then they {v} {a}",
]


@dataclass
class SyntheticLexicon:
    positive: list[str]
    negative: list[str]
    nouns: list[str]
    verbs: list[str]
    adverbs: list[str]
    function: list[str] = field(default_factory=lambda: list(_FUNCTION))

    def polarity(self, style: int) -> list[str]:
        return self.positive if style == 1 else self.negative

    def words(self) -> list[str]:
        return self.function + self.positive + self.negative + self.nouns + self.verbs + self.adverbs


def synthetic_lexicon(vocab_size: int) -> SyntheticLexicon:
    """Split ``vocab_size`` word types between the lexical categories.

    Real words are used first; filler types ``<category><k>`` cover the rest.
    """
    if vocab_size < 50:
        raise DataError("synthetic vocabulary needs at least 50 word types")
    free = vocab_size - len(_FUNCTION)
    n_pol = max(4, int(round(0.12 * free)))
    n_verb = max(4, int(round(0.14 * free)))
    n_adv = max(4, int(round(0.10 * free)))
    n_noun = free - 2 * n_pol - n_verb - n_adv

    def take(pool, n, stem):
        return list(pool[:n]) + [f"{stem}{k}" for k in range(n - len(pool[:n]))]

    return SyntheticLexicon(
        positive=take(_POSITIVE, n_pol, "goodword"),
        negative=take(_NEGATIVE, n_pol, "badword"),
        nouns=take(_NOUNS, n_noun, "thing"),
        verbs=take(_VERBS, n_verb, "did"),
        adverbs=take(_ADVERBS, n_adv, "when"),
    )


def synthetic_sentences(seed: int, n_per_style: int, vocab_size: int = 200):
    """(label, sentence) pairs, balanced, shuffled, deterministic in ``seed``."""
    lex = synthetic_lexicon(vocab_size)
    rng = np.random.default_rng(seed)
    out = []
    for style in (0, 1):
        pol = lex.polarity(style)
        for _ in range(n_per_style):
            tpl = _TEMPLATES[rng.integers(len(_TEMPLATES))]
            n, n2 = rng.choice(len(lex.nouns), size=2, replace=False)
            text = tpl.format(
                n=lex.nouns[n], n2=lex.nouns[n2], p=pol[rng.integers(len(pol))],
                v=lex.verbs[rng.integers(len(lex.verbs))], a=lex.adverbs[rng.integers(len(lex.adverbs))],
            )
            out.append((style, text))
    order = rng.permutation(len(out))
    return [out[i] for i in order], lex


def generate_synthetic_corpus(seed: int, n_per_style: int, vocab_size: int = 200) -> Corpus:
    """Templated two-style corpus whose style is fixed by one polarity word.

    The vocabulary holds every word type of the lexicon (even unused ones), so
    its size is ``vocab_size`` plus the reserved ids.
    """
    pairs, lex = synthetic_sentences(seed, n_per_style, vocab_size)
    vocab = Vocabulary(lex.words())
    rows = [TokenSequence(vocab.encode(s.split()), label) for label, s in pairs]
    return Corpus(rows, vocab)


def split_corpus(corpus: Corpus, fractions=(0.8, 0.1, 0.1), seed: int = 0) -> list[Corpus]:
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(corpus.rows))
    bounds = np.cumsum([math.floor(f * len(order)) for f in fractions[:-1]])
    return [corpus.subset(part.tolist()) for part in np.split(order, bounds)]
