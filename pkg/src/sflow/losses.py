"""Reconstruction, cycle, content and style objectives and their weighted sum."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import Batch
from .errors import ConfigError, ContractError
from .flow import LatentState, chain_forward, chain_inverse
from .transfer import FlowModel, decode_tokens, encode_embeddings, styled_latent


STYLE_DECODINGS = ("continuous", "straight_through", "soft_straight_through")


@dataclass(frozen=True)
class LossWeights:
    self_w: float = 0.5
    cycle: float = 0.5
    content: float = 1.0
    style: float = 1.0

    def __post_init__(self):
        if min(self.as_tuple()) < 0:
            raise ConfigError(f"loss weights must be nonnegative, got {self.as_tuple()}")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.self_w, self.cycle, self.content, self.style)


@dataclass
class LossBreakdown:
    self_loss: Tensor
    cycle_loss: Tensor
    content_loss: Tensor
    style_loss: Tensor
    total: Tensor
    weights: LossWeights

    def values(self) -> dict[str, float]:
        return {"self": self.self_loss.item(), "cycle": self.cycle_loss.item(),
                "content": self.content_loss.item(), "style": self.style_loss.item(),
                "total": self.total.item()}


def _nonpad_for(shape, nonpad) -> np.ndarray:
    if nonpad is None:
        return np.ones(shape, dtype=bool)
    nonpad = np.asarray(nonpad, dtype=bool)
    if nonpad.shape != shape:
        raise ContractError(f"padding mask {nonpad.shape} does not match {shape}")
    return nonpad


def reconstruction_nll(predicted, target, embedding_table: np.ndarray, nonpad=None) -> Tensor:
    """Mean ``-log softmax(row @ E^T)[target]`` over non-padding positions."""
    predicted = ad.as_tensor(predicted)
    target = np.asarray(target, dtype=np.int64)
    if predicted.shape[:-1] != target.shape:
        raise ContractError(f"{predicted.shape[:-1]} predicted rows for targets shaped {target.shape}")
    nonpad = _nonpad_for(target.shape, nonpad)
    logp = ad.log_softmax(ad.matmul(predicted, np.ascontiguousarray(embedding_table.T)))
    pick = np.zeros(logp.shape)
    np.put_along_axis(pick, target[..., None], 1.0, axis=-1)
    pick *= nonpad[..., None]
    return -ad.sum_(logp * pick) * (1.0 / max(int(nonpad.sum()), 1))


def content_loss(z_c, z_c2, mask=None) -> Tensor:
    """Squared L2 distance between matching rows, averaged over rows."""
    z_c, z_c2 = ad.as_tensor(z_c), ad.as_tensor(z_c2)
    if z_c.shape != z_c2.shape:
        raise ContractError(f"content rows {z_c.shape} and {z_c2.shape} differ")
    diff = z_c - z_c2
    sq = diff * diff
    if mask is None:
        return ad.sum_(sq) * (1.0 / int(np.prod(z_c.shape[:-1])))
    mask = np.asarray(mask, dtype=bool)
    return ad.sum_(ad.where(mask[..., None], sq, 0.0)) * (1.0 / max(int(mask.sum()), 1))


def style_loss(transferred, target_style, scorer, nonpad=None) -> Tensor:
    """Mean ``-log p(target | transferred)`` under the frozen classifier."""
    transferred = ad.as_tensor(transferred)
    if transferred.ndim == 2:
        transferred = transferred.reshape(1, *transferred.shape)
    B = transferred.shape[0]
    targets = np.broadcast_to(np.asarray(target_style, dtype=np.int64), (B,))
    logp = scorer.log_probs(transferred, nonpad)
    pick = np.zeros(logp.shape)
    pick[np.arange(B), targets] = 1.0
    return -ad.sum_(logp * pick) * (1.0 / B)


def total_loss(self_l, cycle_l, content_l, style_l, weights: LossWeights | None = None) -> LossBreakdown:
    w = weights or LossWeights()
    parts = [ad.as_tensor(p) for p in (self_l, cycle_l, content_l, style_l)]
    total = parts[0] * w.self_w + parts[1] * w.cycle + parts[2] * w.content + parts[3] * w.style
    return LossBreakdown(*parts, total=total, weights=w)


def opposite_styles(labels, n_styles: int, rng: np.random.Generator) -> np.ndarray:
    """A uniformly drawn style different from each label."""
    labels = np.asarray(labels, dtype=np.int64)
    return (labels + rng.integers(1, n_styles, size=labels.shape)) % n_styles


def expected_embedding(x: Tensor, embedding_table: np.ndarray, nonpad, temperature: float = 1.0) -> Tensor:
    """Vocabulary rows averaged under ``softmax(x @ E^T / temperature)``.

    Keeps what the classifier sees inside the convex hull of real words while
    staying differentiable.
    """
    if not temperature > 0:
        raise ConfigError(f"decoding temperature must be positive, got {temperature}")
    probs = ad.softmax(ad.matmul(x, np.ascontiguousarray(embedding_table.T / temperature)))
    return ad.where(nonpad[..., None], ad.matmul(probs, embedding_table), x)


def straight_through(x: Tensor, embedding_table: np.ndarray, nonpad) -> Tensor:
    """Nearest-vocabulary rows in the forward pass, identity gradient."""
    snapped = embedding_table[decode_tokens(x.data, embedding_table)]
    shift = np.where(nonpad[..., None], snapped - x.data, 0.0)
    return x + shift


def soft_straight_through(x: Tensor, embedding_table: np.ndarray, nonpad, temperature: float = 4.0) -> Tensor:
    """Nearest-vocabulary rows of ``x`` forward; gradient of :func:`expected_embedding` backward.

    Unlike the identity gradient, this one fades once ``x`` sits firmly on one
    word, so the rows cannot drift away from the vocabulary.
    """
    soft = expected_embedding(x, embedding_table, nonpad, temperature)
    snapped = embedding_table[decode_tokens(x.data, embedding_table)]
    shift = np.where(nonpad[..., None], snapped - soft.data, 0.0)
    return soft + shift


# --- model-level objectives -------------------------------------------------------

@dataclass
class _Pass:
    z: LatentState
    self_out: Tensor
    transferred: Tensor


def _shared_pass(batch: Batch, targets, model: FlowModel) -> _Pass:
    """Encode once and invert the same-style and target-style latents together."""
    z = encode_embeddings(model.embed(batch.ids), batch.nonpad, model)
    B = batch.size
    both = ad.concat([styled_latent(z, batch.labels, model), styled_latent(z, targets, model)], axis=0)
    parts = [np.concatenate([p, p]) for p in z.partitions]
    out = chain_inverse(both, model.chain, parts, np.concatenate([z.nonpad, z.nonpad]))
    return _Pass(z, out[:B], out[B:])


def _transfer_tail(batch: Batch, targets, model: FlowModel, p: _Pass, style_decoding: str,
                   temperature: float = 4.0):
    transferred = p.transferred
    judged = transferred
    if style_decoding == "straight_through":
        # only the classifier sees snapped rows; the cycle stays continuous
        judged = straight_through(transferred, model.embedding, batch.nonpad)
    elif style_decoding == "soft_straight_through":
        judged = soft_straight_through(transferred, model.embedding, batch.nonpad, temperature)
    elif style_decoding != "continuous":
        raise ConfigError(f"unknown style decoding {style_decoding!r}")
    sty = style_loss(judged, targets, model.style_classifier, batch.nonpad)
    z2 = chain_forward(transferred, model.chain, model.scorer, batch.nonpad)
    # content is compared, and the source style re-injected, at the original positions
    z2.style_positions = p.z.style_positions
    content_rows = batch.nonpad & ~p.z.style_positions
    con = content_loss(p.z.values, z2.values, content_rows)
    back = chain_inverse(styled_latent(z2, batch.labels, model), model.chain, z2.partitions, batch.nonpad)
    cyc = reconstruction_nll(back, batch.ids, model.embedding, batch.nonpad)
    return cyc, con, sty


def compute_losses(batch: Batch, targets, model: FlowModel, weights: LossWeights | None = None,
                   style_decoding: str = "continuous", temperature: float = 4.0) -> LossBreakdown:
    targets = np.broadcast_to(np.asarray(targets, dtype=np.int64), (batch.size,))
    p = _shared_pass(batch, targets, model)
    self_l = reconstruction_nll(p.self_out, batch.ids, model.embedding, batch.nonpad)
    cyc, con, sty = _transfer_tail(batch, targets, model, p, style_decoding, temperature)
    return total_loss(self_l, cyc, con, sty, weights)


def self_loss(batch: Batch, model: FlowModel) -> Tensor:
    z = encode_embeddings(model.embed(batch.ids), batch.nonpad, model)
    out = chain_inverse(styled_latent(z, batch.labels, model), model.chain, z.partitions, batch.nonpad)
    return reconstruction_nll(out, batch.ids, model.embedding, batch.nonpad)


def cycle_loss(batch: Batch, targets, model: FlowModel, style_decoding: str = "continuous") -> Tensor:
    targets = np.broadcast_to(np.asarray(targets, dtype=np.int64), (batch.size,))
    if (targets == batch.labels).any():
        raise ContractError("cycle loss needs a target style different from the source")
    return compute_losses(batch, targets, model, style_decoding=style_decoding).cycle_loss
