"""Affine coupling layers over token sequences and the flow chain built from them.

Tensors are batched as (B, L, D).  In the token-split mode a coupling layer
keeps the content rows fixed and maps each style row ``x`` to
``exp(log_s) * x + t``, where ``(log_s, t)`` come from a Transformer block that
only sees the content rows.  The channel-split mode does the same across the
two halves of the feature axis.
"""
from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ContractError, DimensionError, NumericError
from .nn import Module, glorot, layer_norm, ones, param, zeros
from .scorer import MASK_VALUE, split_mask

LOG_SCALE_BOUND = 5.0
SPLIT_MODES = ("attention", "parity", "channel")


@functools.lru_cache(maxsize=32)
def positional_encoding(length: int, dim: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    i = np.arange(dim)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / dim)
    enc = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
    enc.setflags(write=False)
    return enc


class TransformerBlock(Module):
    """One post-norm attention + feed-forward layer with a linear output head.

    Rows flagged as hidden are replaced by a learned slot vector before the
    block runs, so nothing downstream can depend on their values.
    """

    def __init__(self, in_dim: int, out_dim: int, model_dim: int = 256, heads: int = 4,
                 ffn_dim: int | None = None, rng: np.random.Generator | None = None,
                 head_scale: float = 0.0):
        if model_dim % heads:
            raise ConfigError(f"model_dim {model_dim} not divisible by {heads} heads")
        rng = rng if rng is not None else np.random.default_rng(0)
        ffn_dim = ffn_dim or model_dim
        self.w_in = glorot(rng, in_dim, model_dim)
        self.b_in = zeros(model_dim)
        self.slot = zeros(model_dim)
        self.wq = glorot(rng, model_dim, model_dim)
        self.wk = glorot(rng, model_dim, model_dim)
        self.wv = glorot(rng, model_dim, model_dim)
        self.wo = glorot(rng, model_dim, model_dim)
        self.ln1_g = ones(model_dim)
        self.ln1_b = zeros(model_dim)
        self.w1 = glorot(rng, model_dim, ffn_dim)
        self.b1 = zeros(ffn_dim)
        self.w2 = glorot(rng, ffn_dim, model_dim)
        self.b2 = zeros(model_dim)
        self.ln2_g = ones(model_dim)
        self.ln2_b = zeros(model_dim)
        self.w_out = param(rng.normal(scale=head_scale / math.sqrt(model_dim), size=(model_dim, out_dim)))
        self.b_out = zeros(out_dim)
        self.heads = heads
        self.model_dim = model_dim

    def __call__(self, x, hidden: np.ndarray, key_mask: np.ndarray) -> Tensor:
        x = ad.as_tensor(x)
        B, L, _ = x.shape
        H, M = self.heads, self.model_dim
        dh = M // H
        hid = hidden[..., None]
        h = ad.where(hid, self.slot, ad.matmul(ad.where(hid, 0.0, x), self.w_in) + self.b_in)
        h = h + positional_encoding(L, M)

        def heads(t):
            return ad.transpose(t.reshape(B, L, H, dh), (0, 2, 1, 3))

        q, k, v = heads(h @ self.wq), heads(h @ self.wk), heads(h @ self.wv)
        scores = ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(dh))
        scores = scores + np.where(key_mask, 0.0, MASK_VALUE)[:, None, None, :]
        ctx = ad.matmul(ad.softmax(scores), v)
        ctx = ad.transpose(ctx, (0, 2, 1, 3)).reshape(B, L, M)
        h = layer_norm(h + ctx @ self.wo, self.ln1_g, self.ln1_b)
        f = h @ self.w1 + self.b1
        f = f * ad.sigmoid(f)
        h = layer_norm(h + f @ self.w2 + self.b2, self.ln2_g, self.ln2_b)
        return h @ self.w_out + self.b_out


class CouplingLayer(Module):
    """Affine coupling with a token split or a channel split."""

    def __init__(self, dim: int, split_mode: str = "attention", model_dim: int | None = None,
                 heads: int = 4, ffn_dim: int | None = None, rng: np.random.Generator | None = None,
                 head_scale: float = 0.0, swap: bool = False):
        if split_mode not in SPLIT_MODES:
            raise ConfigError(f"unknown split mode {split_mode!r}")
        self.dim = dim
        self.split_mode = split_mode
        self.swap = swap
        model_dim = model_dim or dim
        if split_mode == "channel":
            if dim < 2:
                raise ConfigError("channel split needs at least 2 channels")
            half = dim // 2
            first, second = np.arange(half), np.arange(half, dim)
            self._moved, self._kept = (second, first) if swap else (first, second)
            in_dim, out_dim = len(self._kept), 2 * len(self._moved)
        else:
            in_dim, out_dim = dim, 2 * dim
        self.block = TransformerBlock(in_dim, out_dim, model_dim, heads, ffn_dim, rng, head_scale)

    # token split ---------------------------------------------------------------

    def scale_shift(self, x, style: np.ndarray, nonpad: np.ndarray) -> tuple[Tensor, Tensor]:
        """(log s, t) for every row, computed from the content rows only."""
        out = self.block(x, hidden=style, key_mask=nonpad)
        D = out.shape[-1] // 2
        return ad.clip(out[..., :D], -LOG_SCALE_BOUND, LOG_SCALE_BOUND), out[..., D:]

    def forward(self, x, style: np.ndarray | None, nonpad: np.ndarray) -> tuple[Tensor, Tensor]:
        x = ad.as_tensor(x)
        if self.split_mode == "channel":
            return self._channel(x, nonpad, inverse=False)
        _check_partition(style, nonpad)
        log_s, t = self.scale_shift(x, style, nonpad)
        sel = style[..., None]
        y = ad.where(sel, ad.exp(log_s) * x + t, x)
        logdet = ad.sum_(ad.where(sel, log_s, 0.0), axis=(1, 2))
        return y, logdet

    def inverse(self, y, style: np.ndarray | None, nonpad: np.ndarray) -> tuple[Tensor, Tensor]:
        y = ad.as_tensor(y)
        if self.split_mode == "channel":
            return self._channel(y, nonpad, inverse=True)
        _check_partition(style, nonpad)
        log_s, t = self.scale_shift(y, style, nonpad)
        s = ad.exp(log_s)
        if np.abs(s.data).min() < 1e-12:
            raise NumericError("coupling scale below 1e-12; inverse is ill-defined")
        sel = style[..., None]
        x = ad.where(sel, (y - t) / s, y)
        logdet = -ad.sum_(ad.where(sel, log_s, 0.0), axis=(1, 2))
        return x, logdet

    # channel split -------------------------------------------------------------

    def _channel(self, x: Tensor, nonpad: np.ndarray, inverse: bool) -> tuple[Tensor, Tensor]:
        moved = x[..., self._moved]
        kept = x[..., self._kept]
        out = self.block(kept, hidden=np.zeros(nonpad.shape, bool), key_mask=nonpad)
        n = len(self._moved)
        log_s = ad.clip(out[..., :n], -LOG_SCALE_BOUND, LOG_SCALE_BOUND)
        t = out[..., n:]
        rows = nonpad[..., None]
        if inverse:
            new = ad.where(rows, (moved - t) / ad.exp(log_s), moved)
        else:
            new = ad.where(rows, ad.exp(log_s) * moved + t, moved)
        logdet = ad.sum_(ad.where(rows, log_s, 0.0), axis=(1, 2))
        first, second = (kept, new) if self.swap else (new, kept)
        y = ad.concat([first, second], axis=-1)
        return y, (-logdet if inverse else logdet)


class ElementwiseAffine(Module):
    """Per-channel scale and shift, ``y = exp(log_scale) * x + shift``."""

    split_mode = "elementwise"

    def __init__(self, dim: int, log_scale=None, shift=None):
        self.log_scale = param(np.zeros(dim) if log_scale is None else log_scale)
        self.shift = param(np.zeros(dim) if shift is None else shift)

    def forward(self, x, style, nonpad):
        x = ad.as_tensor(x)
        rows = nonpad[..., None]
        y = ad.where(rows, ad.exp(self.log_scale) * x + self.shift, x)
        logdet = ad.sum_(ad.where(rows, self.log_scale, 0.0), axis=(1, 2))
        return y, logdet

    def inverse(self, y, style, nonpad):
        y = ad.as_tensor(y)
        rows = nonpad[..., None]
        x = ad.where(rows, (y - self.shift) / ad.exp(self.log_scale), y)
        logdet = -ad.sum_(ad.where(rows, self.log_scale, 0.0), axis=(1, 2))
        return x, logdet


def _check_partition(style, nonpad) -> None:
    if style is None or style.shape != nonpad.shape:
        raise ContractError("token split needs a style mask shaped like the batch")
    content = nonpad & ~style
    if not style.any(axis=1).all() or not content.any(axis=1).all():
        raise ContractError("partition must leave both content and style sides nonempty")
    if (style & ~nonpad).any():
        raise ContractError("padding positions cannot be style positions")


class FlowChain(Module):
    """K coupling layers applied in order.

    ``partition_source`` decides which tensor the scorer reads when choosing
    a layer's style rows: ``"layer"`` scores each layer's own input,
    ``"input"`` scores the chain input once and reuses that split.
    """

    def __init__(self, dim: int, length: int = 8, split_mode: str = "attention",
                 model_dim: int | None = None, heads: int = 4, ffn_dim: int | None = None,
                 rng: np.random.Generator | None = None, head_scale: float = 0.0,
                 rho: float = 0.25, partition_source: str = "layer"):
        if length < 1:
            raise ConfigError("chain length must be positive")
        if partition_source not in ("layer", "input"):
            raise ConfigError(f"unknown partition source {partition_source!r}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.layers = [
            CouplingLayer(dim, split_mode, model_dim, heads, ffn_dim, rng, head_scale, swap=bool(k % 2))
            for k in range(length)
        ]
        self.dim = dim
        self.split_mode = split_mode
        self.rho = rho
        self.partition_source = partition_source

    def __len__(self):
        return len(self.layers)

    def hyperparameters(self) -> dict:
        blk = self.layers[0].block
        return {"dim": self.dim, "length": len(self.layers), "split_mode": self.split_mode,
                "model_dim": blk.model_dim, "heads": blk.heads, "ffn_dim": blk.w1.shape[1],
                "rho": self.rho, "partition_source": self.partition_source}

    def partition(self, h: np.ndarray, k: int, scorer, nonpad: np.ndarray,
                  cached: np.ndarray | None = None) -> np.ndarray | None:
        if self.split_mode == "channel":
            return None
        if self.split_mode == "parity":
            return parity_mask(nonpad, k)
        weights = cached
        if weights is None:
            weights = uniform_weights(nonpad) if scorer is None else scorer.token_weights(h, nonpad)
        return split_mask(weights, self.rho, nonpad, parity=k % 2)


def uniform_weights(nonpad: np.ndarray) -> np.ndarray:
    return nonpad / nonpad.sum(axis=1, keepdims=True)


def parity_mask(nonpad: np.ndarray, k: int) -> np.ndarray:
    """Every other non-padding token, alternating with layer index."""
    order = np.cumsum(nonpad, axis=1) - 1
    style = nonpad & (order % 2 == k % 2)
    return style


@dataclass
class LatentState:
    """Latent rows plus the bookkeeping needed to invert them exactly."""

    values: Tensor
    nonpad: np.ndarray
    partitions: list
    logdet: Tensor
    layer_logdets: list = field(default_factory=list)
    input_weights: np.ndarray | None = None
    style_positions: np.ndarray | None = None
    stale: bool = False

    @property
    def batch_size(self) -> int:
        return self.values.shape[0]

    def positions(self, b: int = 0) -> tuple[np.ndarray, np.ndarray]:
        """(content, style) index arrays of sentence ``b`` from ``style_positions``."""
        if self.style_positions is None:
            raise ContractError("latent has not been disentangled")
        style = self.style_positions[b] & self.nonpad[b]
        length = int(self.nonpad[b].sum())
        idx = np.arange(length)
        return idx[~style[:length]], idx[style[:length]]


def _batched(x, nonpad):
    x = ad.as_tensor(x)
    if x.ndim == 2:
        x = x.reshape(1, *x.shape)
    if x.ndim != 3:
        raise DimensionError(f"expected (B, L, D) or (L, D) embeddings, got {x.shape}")
    B, L, _ = x.shape
    if nonpad is None:
        nonpad = np.ones((B, L), dtype=bool)
    nonpad = np.asarray(nonpad, dtype=bool).reshape(B, L)
    return x, nonpad


def coupling_forward(x, layer: CouplingLayer, style: np.ndarray | None, nonpad=None):
    x, nonpad = _batched(x, nonpad)
    style = None if style is None else np.asarray(style, bool).reshape(nonpad.shape)
    return layer.forward(x, style, nonpad)


def coupling_inverse(y, layer: CouplingLayer, style: np.ndarray | None, nonpad=None):
    y, nonpad = _batched(y, nonpad)
    style = None if style is None else np.asarray(style, bool).reshape(nonpad.shape)
    return layer.inverse(y, style, nonpad)


def chain_forward(x, chain: FlowChain, scorer=None, nonpad=None, partitions=None) -> LatentState:
    """Run every layer in order, choosing (or reusing) each layer's split."""
    x, nonpad = _batched(x, nonpad)
    if chain.split_mode != "channel" and (nonpad.sum(axis=1) < 2).any():
        raise ContractError("sequences need at least 2 tokens to split")
    if partitions is not None and len(partitions) != len(chain.layers):
        raise ContractError(f"{len(partitions)} partitions for a chain of {len(chain.layers)} layers")
    h = x
    parts, logdets = [], []
    first_weights = None
    if chain.split_mode == "attention" and partitions is None:
        first_weights = uniform_weights(nonpad) if scorer is None else scorer.token_weights(x, nonpad)
    for k, layer in enumerate(chain.layers):
        if partitions is not None:
            style = partitions[k]
        elif k == 0 or chain.partition_source == "input":
            style = chain.partition(h.data, k, scorer, nonpad, cached=first_weights)
        else:
            style = chain.partition(h.data, k, scorer, nonpad)
        h, ld = layer.forward(h, style, nonpad)
        parts.append(style)
        logdets.append(ld)
    total = logdets[0]
    for ld in logdets[1:]:
        total = total + ld
    return LatentState(values=h, nonpad=nonpad, partitions=parts, logdet=total,
                       layer_logdets=logdets, input_weights=first_weights)


def chain_inverse(z, chain: FlowChain, partitions=None, nonpad=None, with_logdet: bool = False):
    """Undo :func:`chain_forward` using the recorded per-layer splits."""
    if isinstance(z, LatentState):
        values = z.values
        nonpad = z.nonpad if nonpad is None else nonpad
        partitions = z.partitions if partitions is None else partitions
    else:
        values = z
    values, nonpad = _batched(values, nonpad)
    if partitions is None or len(partitions) != len(chain.layers):
        n = None if partitions is None else len(partitions)
        raise ContractError(f"{n} partitions for a chain of {len(chain.layers)} layers")
    h = values
    total = None
    for layer, style in zip(reversed(chain.layers), reversed(partitions)):
        h, ld = layer.inverse(h, style, nonpad)
        total = ld if total is None else total + ld
    return (h, total) if with_logdet else h


def log_density(z: LatentState) -> Tensor:
    """log N(values; 0, I) over non-padding entries plus the forward log-det."""
    v = z.values
    rows = z.nonpad[..., None]
    sq = ad.sum_(ad.where(rows, v * v, 0.0), axis=(1, 2))
    n = z.nonpad.sum(axis=1) * v.shape[-1]
    return -0.5 * sq - 0.5 * n * math.log(2 * math.pi) + z.logdet


def transform_density(x, layers, nonpad=None) -> LatentState:
    """Push ``x`` through arbitrary layers without splits (density checks)."""
    x, nonpad = _batched(x, nonpad)
    h, total, lds = x, None, []
    for layer in layers:
        h, ld = layer.forward(h, None, nonpad)
        lds.append(ld)
        total = ld if total is None else total + ld
    return LatentState(values=h, nonpad=nonpad, partitions=[None] * len(layers),
                       logdet=total, layer_logdets=lds)
