"""Bidirectional GRU classifier with additive attention.

The attention weights it assigns to tokens decide which positions are treated
as style carriers; its class posterior is the style classifier used by the
style loss and by evaluation.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, VocabularyError
from .nn import Module, glorot, layer_norm, param, zeros

MASK_VALUE = -1e9
_FIRST_WORD = 4  # ids below are padding, unknown and sentence markers


class EmbeddingTable(Module):
    """Token vectors, exposed with every row normalized to mean 0 and variance 1."""

    def __init__(self, vocab_size: int, dim: int, rng: np.random.Generator):
        self.weight = param(rng.normal(size=(vocab_size, dim)))

    @property
    def vocab_size(self) -> int:
        return self.weight.shape[0]

    def table(self) -> Tensor:
        return layer_norm(self.weight, eps=1e-12)

    def array(self) -> np.ndarray:
        with ad.no_grad():
            return self.table().data

    def lookup(self, ids) -> Tensor:
        ids = np.asarray(ids)
        if ids.size and (ids.min() < 0 or ids.max() >= self.vocab_size):
            raise VocabularyError(f"token id outside vocabulary of size {self.vocab_size}")
        return ad.gather_rows(self.table(), ids)


class GRU(Module):
    def __init__(self, in_dim: int, hidden: int, rng: np.random.Generator):
        self.w = glorot(rng, in_dim, 3 * hidden)
        self.u = glorot(rng, hidden, 3 * hidden)
        self.b = zeros(3 * hidden)
        self._hidden = hidden

    def run(self, x: Tensor, nonpad: np.ndarray, reverse: bool = False) -> Tensor:
        """Hidden states for every position, shape (B, L, H).

        Padding steps carry the previous state through unchanged, so results
        do not depend on how much padding follows a sentence.
        """
        B, L, _ = x.shape
        H = self._hidden
        proj = ad.matmul(x, self.w) + self.b
        h = Tensor(np.zeros((B, H)))
        states: list[Tensor | None] = [None] * L
        steps = range(L - 1, -1, -1) if reverse else range(L)
        for t in steps:
            xp = proj[:, t, :]
            hu = ad.matmul(h, self.u)
            z = ad.sigmoid(xp[:, :H] + hu[:, :H])
            r = ad.sigmoid(xp[:, H:2 * H] + hu[:, H:2 * H])
            n = ad.tanh(xp[:, 2 * H:] + r * hu[:, 2 * H:])
            h_new = n + z * (h - n)
            h = ad.where(nonpad[:, t, None], h_new, h)
            states[t] = h
        return ad.stack(states, axis=1)


class Scorer(Module):
    """BiGRU encoder, attention pooling and a linear head over styles.

    A freshly constructed scorer has a zero attention vector and a zero head,
    so it assigns uniform weights and uniform class probabilities until
    trained.
    """

    def __init__(self, vocab_size: int, dim: int, hidden: int = 32, attn_dim: int | None = None,
                 n_styles: int = 2, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        attn_dim = attn_dim or hidden
        self.embedding = EmbeddingTable(vocab_size, dim, rng)
        self.fwd = GRU(dim, hidden, rng)
        self.bwd = GRU(dim, hidden, rng)
        self.att_w = glorot(rng, 2 * hidden, attn_dim)
        self.att_e = glorot(rng, dim, attn_dim)
        self.att_b = zeros(attn_dim)
        self.att_v = zeros(attn_dim, 1)
        self.cls_w = zeros(2 * hidden + dim, n_styles)
        self.cls_b = zeros(n_styles)
        self.hidden = hidden
        self.dim = dim
        self.n_styles = n_styles
        self.train_embeddings = True

    @classmethod
    def random(cls, vocab_size: int, dim: int, hidden: int = 8, n_styles: int = 2,
               rng: np.random.Generator | None = None, scale: float = 1.0) -> Scorer:
        """Untrained scorer with random attention and head (non-uniform weights)."""
        rng = rng if rng is not None else np.random.default_rng(0)
        s = cls(vocab_size, dim, hidden=hidden, n_styles=n_styles, rng=rng)
        s.att_v.data = scale * rng.normal(size=s.att_v.shape)
        s.cls_w.data = scale * rng.normal(size=s.cls_w.shape) / math.sqrt(2 * hidden + dim)
        return s

    def hyperparameters(self) -> dict:
        return {"vocab_size": self.embedding.vocab_size, "dim": self.dim, "hidden": self.hidden,
                "attn_dim": self.att_w.shape[1], "n_styles": self.n_styles}

    def encode(self, emb: Tensor, nonpad: np.ndarray) -> Tensor:
        hf = self.fwd.run(emb, nonpad)
        hb = self.bwd.run(emb, nonpad, reverse=True)
        return ad.concat([hf, hb], axis=-1)

    def attend(self, emb, nonpad: np.ndarray | None = None,
               drop_states: np.ndarray | None = None) -> tuple[Tensor, Tensor]:
        """Attention weights (B, L) and class logits (B, S) for continuous inputs.

        The pooled features are the recurrent states next to the raw token
        vectors.  ``drop_states`` (B,) zeroes the recurrent part for flagged
        sentences; training uses it so the head cannot always lean on a
        neighbour's context and must attend to the evidence itself.
        """
        emb = ad.as_tensor(emb)
        if emb.ndim == 2:
            emb = emb.reshape(1, *emb.shape)
        B, L, _ = emb.shape
        nonpad = _nonpad_or_all(nonpad, B, L)
        if not nonpad.any(axis=1).all():
            raise ContractError("cannot score an empty sequence")
        states = self.encode(emb, nonpad)
        # the token's own vector enters the energy so weight lands on the word, not its neighbours
        pre = ad.matmul(states, self.att_w) + ad.matmul(emb, self.att_e) + self.att_b
        energy = ad.matmul(ad.tanh(pre), self.att_v)
        energy = ad.where(nonpad, energy.reshape(B, L), MASK_VALUE)
        weights = ad.softmax(energy)
        if drop_states is not None:
            states = ad.where(np.asarray(drop_states, bool)[:, None, None], 0.0, states)
        feats = ad.concat([states, emb], axis=-1)
        pooled = ad.matmul(weights.reshape(B, 1, L), feats).reshape(B, feats.shape[-1])
        logits = ad.matmul(pooled, self.cls_w) + self.cls_b
        return weights, logits

    def token_weights(self, emb, nonpad: np.ndarray | None = None) -> np.ndarray:
        """Attention weights as a plain array, computed without the tape."""
        x = emb.data if isinstance(emb, Tensor) else np.asarray(emb, dtype=np.float64)
        if x.ndim == 2:
            x = x[None]
        B, L, _ = x.shape
        nonpad = _nonpad_or_all(nonpad, B, L)
        if not nonpad.any(axis=1).all():
            raise ContractError("cannot score an empty sequence")
        states = np.concatenate([_gru_array(self.fwd, x, nonpad, False),
                                 _gru_array(self.bwd, x, nonpad, True)], axis=-1)
        pre = states @ self.att_w.data + x @ self.att_e.data + self.att_b.data
        energy = (np.tanh(pre) @ self.att_v.data)[..., 0]
        energy = np.where(nonpad, energy, MASK_VALUE)
        e = np.exp(energy - energy.max(axis=-1, keepdims=True))
        return e / e.sum(axis=-1, keepdims=True)

    def log_probs(self, emb, nonpad: np.ndarray | None = None) -> Tensor:
        return ad.log_softmax(self.attend(emb, nonpad)[1])

    def predict(self, ids: np.ndarray, nonpad: np.ndarray) -> np.ndarray:
        with ad.no_grad():
            emb = self.embedding.lookup(ids)
            return np.argmax(self.attend(emb, nonpad)[1].data, axis=-1)


def _sigmoid(x):
    return 0.5 * (np.tanh(0.5 * x) + 1.0)


def _gru_array(gru: GRU, x: np.ndarray, nonpad: np.ndarray, reverse: bool) -> np.ndarray:
    """Same recurrence as :meth:`GRU.run` on plain arrays (no gradient)."""
    B, L, _ = x.shape
    H = gru._hidden
    proj = x @ gru.w.data + gru.b.data
    u = gru.u.data
    h = np.zeros((B, H))
    out = np.empty((B, L, H))
    for t in (range(L - 1, -1, -1) if reverse else range(L)):
        xp, hu = proj[:, t], h @ u
        z = _sigmoid(xp[:, :H] + hu[:, :H])
        r = _sigmoid(xp[:, H:2 * H] + hu[:, H:2 * H])
        n = np.tanh(xp[:, 2 * H:] + r * hu[:, 2 * H:])
        h = np.where(nonpad[:, t, None], n + z * (h - n), h)
        out[:, t] = h
    return out


def _nonpad_or_all(nonpad, B, L) -> np.ndarray:
    if nonpad is None:
        return np.ones((B, L), dtype=bool)
    nonpad = np.asarray(nonpad, dtype=bool)
    return nonpad.reshape(B, L)


# --- splitting ----------------------------------------------------------------

def split_mask(weights: np.ndarray, rho: float, nonpad: np.ndarray | None = None,
               parity: int | None = None) -> np.ndarray:
    """Boolean style mask choosing the top ``ceil(rho * n)`` non-padding positions.

    Ties are broken toward positions whose index parity equals ``parity`` (when
    given) and then toward the smaller index.  Padding is always content and the
    count is capped at ``n - 1`` so both sides stay nonempty.
    """
    if not 0.0 < rho < 1.0:
        raise ContractError(f"style fraction must lie in (0, 1), got {rho}")
    w = np.atleast_2d(np.asarray(weights, dtype=np.float64))
    B, L = w.shape
    nonpad = _nonpad_or_all(nonpad, B, L)
    counts = nonpad.sum(axis=1)
    if (counts < 2).any():
        raise ContractError("attention split needs at least 2 non-padding tokens")
    idx = np.arange(L)
    pref = np.zeros(L) if parity is None else (idx % 2 != parity % 2).astype(float)
    style = np.zeros((B, L), dtype=bool)
    for b in range(B):
        k = min(math.ceil(rho * counts[b]), counts[b] - 1)
        key = np.where(nonpad[b], -w[b], np.inf)
        order = np.lexsort((idx, pref, key))
        style[b, order[:k]] = True
    return style


def attention_split(weights, rho: float, nonpad=None, parity: int | None = None):
    """(content_positions, style_positions) index arrays for one sentence."""
    style = split_mask(np.asarray(weights)[None, :], rho,
                       None if nonpad is None else np.asarray(nonpad)[None, :], parity)[0]
    return np.flatnonzero(~style), np.flatnonzero(style)


# --- sentence-level helpers -----------------------------------------------------

def score_tokens(ids, scorer: Scorer, nonpad=None) -> np.ndarray:
    """Attention weight per position of a single token sequence."""
    ids = np.asarray(ids)
    if ids.size == 0:
        raise ContractError("cannot score an empty sequence")
    nonpad = np.ones(ids.shape, bool) if nonpad is None else np.asarray(nonpad, bool)
    with ad.no_grad():
        emb = scorer.embedding.lookup(ids[None, :])
    return scorer.token_weights(emb, nonpad[None, :])[0]


def classify(x, scorer: Scorer, nonpad=None) -> Tensor:
    """Style probabilities for token ids (int array) or continuous embeddings.

    Token input is embedded and then goes through exactly the same path as
    continuous input.
    """
    if isinstance(x, np.ndarray) and np.issubdtype(x.dtype, np.integer):
        ids = x if x.ndim == 2 else x[None, :]
        if nonpad is not None:
            nonpad = np.asarray(nonpad, bool).reshape(ids.shape)
        with ad.no_grad():
            x = scorer.embedding.lookup(ids)
    return ad.softmax(scorer.attend(x, nonpad)[1])


# --- pretraining ----------------------------------------------------------------

@dataclass
class ScorerReport:
    train_accuracy: float
    heldout_accuracy: float
    losses: list[float] = field(default_factory=list)


def train_scorer(corpus, dim: int, hidden: int = 32, epochs: int = 5, lr: float = 3e-3,
                 batch_size: int = 32, seed: int = 0, holdout: float = 0.1,
                 train_embeddings: bool = True, substitute: float = 0.0,
                 state_dropout: float = 0.5, log=None) -> tuple[Scorer, ScorerReport]:
    """Fit a scorer on a labeled corpus; the returned scorer is frozen.

    ``substitute`` replaces that fraction of word tokens with uniformly drawn
    vocabulary words (label unchanged), so that words which carry no style
    evidence end up scored as uncertain rather than arbitrarily confident.
    ``state_dropout`` is the per-sentence probability of hiding the recurrent
    states from the head (see :meth:`Scorer.attend`).
    """
    if not 0.0 <= substitute < 1.0:
        raise ContractError(f"substitution rate must lie in [0, 1), got {substitute}")
    if not 0.0 <= state_dropout < 1.0:
        raise ContractError(f"state dropout must lie in [0, 1), got {state_dropout}")
    labels = np.array([row.label for row in corpus.rows])
    styles = np.unique(labels)
    if len(styles) < 2:
        raise ContractError("scorer training needs at least two style labels")
    n_styles = max(int(labels.max()) + 1, len(corpus.styles))
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(labels))
    n_hold = int(round(holdout * len(labels)))
    hold_idx, train_idx = order[:n_hold], order[n_hold:]
    scorer = Scorer(corpus.vocab_size, dim, hidden=hidden, n_styles=n_styles, rng=rng)
    scorer.train_embeddings = train_embeddings
    params = scorer.parameters()
    if not train_embeddings:
        scorer.embedding.freeze()
        params = {k: p for k, p in params.items() if p.requires_grad}
    opt = ad.Adam(params, lr=lr)
    losses: list[float] = []
    for epoch in range(epochs):
        perm = train_idx[rng.permutation(len(train_idx))]
        for start in range(0, len(perm), batch_size):
            batch = corpus.batch(perm[start:start + batch_size])
            ids = batch.ids
            if substitute:
                words = batch.nonpad & (ids >= _FIRST_WORD)
                swap = words & (rng.random(ids.shape) < substitute)
                ids = np.where(swap, rng.integers(_FIRST_WORD, scorer.embedding.vocab_size, ids.shape), ids)
            emb = scorer.embedding.lookup(ids)
            drop = rng.random(batch.size) < state_dropout if state_dropout else None
            logp = ad.log_softmax(scorer.attend(emb, batch.nonpad, drop)[1])
            onehot = np.eye(n_styles)[batch.labels]
            loss = -ad.mean(ad.sum_(logp * onehot, axis=-1))
            ad.backward(loss)
            opt.step()
            losses.append(loss.item())
        if log is not None:
            log(f"scorer epoch {epoch + 1}/{epochs} loss={np.mean(losses[-max(1, len(perm) // batch_size):]):.4f}")
    scorer.freeze()
    report = ScorerReport(
        train_accuracy=accuracy(scorer, corpus, train_idx),
        heldout_accuracy=accuracy(scorer, corpus, hold_idx) if n_hold else float("nan"),
        losses=losses,
    )
    return scorer, report


def accuracy(scorer: Scorer, corpus, indices=None, batch_size: int = 256) -> float:
    indices = np.arange(len(corpus.rows)) if indices is None else np.asarray(indices)
    if len(indices) == 0:
        return float("nan")
    correct = 0
    for start in range(0, len(indices), batch_size):
        batch = corpus.batch(indices[start:start + batch_size])
        correct += int((scorer.predict(batch.ids, batch.nonpad) == batch.labels).sum())
    return correct / len(indices)
