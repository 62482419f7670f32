"""Encoding, disentangling, style injection and reverse generation."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import Batch, TokenSequence, Vocabulary, make_batch
from .errors import ConfigError, ContractError, DimensionError, VocabularyError
from .flow import FlowChain, LatentState, chain_forward, chain_inverse
from .nn import Module, param
from .scorer import Scorer, split_mask


@dataclass
class ModelConfig:
    dim: int = 256
    heads: int = 4
    ffn_dim: int = 256
    chain_length: int = 8
    rho: float = 0.25
    cln_eps: float = 1e-6
    cln_reduce: str = "select"          # or "mean"
    split_mode: str = "attention"       # or "parity" / "channel"
    partition_source: str = "layer"     # or "input"
    disentangle_source: str = "tokens"  # or "latent"
    n_styles: int = 2

    def validate(self) -> None:
        if self.cln_reduce not in ("select", "mean"):
            raise ConfigError(f"cln_reduce must be select or mean, got {self.cln_reduce!r}")
        if self.disentangle_source not in ("tokens", "latent"):
            raise ConfigError(f"disentangle_source must be tokens or latent, got {self.disentangle_source!r}")
        if not 0 < self.rho < 1:
            raise ConfigError("rho must lie in (0, 1)")
        if self.cln_eps <= 0:
            raise ConfigError("cln_eps must be positive")


class StyleTable(Module):
    """Per-style gain and bias for conditional layer normalization."""

    def __init__(self, n_styles: int, dim: int, rng: np.random.Generator | None = None,
                 noise: float = 0.0):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.gamma = param(1.0 + noise * rng.normal(size=(n_styles, dim)))
        self.beta = param(noise * rng.normal(size=(n_styles, dim)))

    @property
    def n_styles(self) -> int:
        return self.gamma.shape[0]

    def rows(self, styles) -> tuple[Tensor, Tensor]:
        styles = np.asarray(styles, dtype=np.int64)
        if styles.size and (styles.min() < 0 or styles.max() >= self.n_styles):
            raise ContractError(f"unknown style id in {np.unique(styles).tolist()}")
        return ad.gather_rows(self.gamma, styles), ad.gather_rows(self.beta, styles)


class FlowModel(Module):
    """Frozen vocabulary embeddings and scorer, trainable chain and style table."""

    def __init__(self, vocab: Vocabulary, scorer: Scorer, config: ModelConfig,
                 rng: np.random.Generator | None = None, classifier: Scorer | None = None,
                 head_scale: float = 0.0):
        config.validate()
        rng = rng if rng is not None else np.random.default_rng(0)
        if scorer.dim != config.dim:
            raise ConfigError(f"scorer embedding dim {scorer.dim} != model dim {config.dim}")
        self.config = config
        self.vocab = vocab
        scorer.freeze()
        self.scorer = scorer
        if classifier is not None and classifier is not scorer:
            classifier.freeze()
            self.classifier = classifier
        self.chain = FlowChain(config.dim, config.chain_length, config.split_mode,
                               model_dim=config.dim, heads=config.heads, ffn_dim=config.ffn_dim,
                               rng=rng, head_scale=head_scale, rho=config.rho,
                               partition_source=config.partition_source)
        self.table = StyleTable(config.n_styles, config.dim, rng)
        self._embedding = scorer.embedding.array()

    def refresh(self) -> None:
        """Re-read the embedding table after scorer parameters change."""
        self._embedding = self.scorer.embedding.array()

    @property
    def style_classifier(self) -> Scorer:
        return getattr(self, "classifier", self.scorer)

    @property
    def embedding(self) -> np.ndarray:
        return self._embedding

    def trainable(self) -> dict[str, Tensor]:
        return {k: p for k, p in self.parameters().items() if p.requires_grad}

    def embed(self, ids) -> Tensor:
        ids = np.asarray(ids)
        if ids.size and (ids.min() < 0 or ids.max() >= len(self._embedding)):
            raise VocabularyError(f"token id outside vocabulary of size {len(self._embedding)}")
        return Tensor(self._embedding[ids])


# --- pipeline pieces --------------------------------------------------------------

def _as_batch(x) -> Batch:
    if isinstance(x, Batch):
        return x
    if isinstance(x, TokenSequence):
        return make_batch([x])
    if isinstance(x, (list, tuple)) and x and isinstance(x[0], TokenSequence):
        return make_batch(list(x))
    raise ContractError(f"cannot build a batch from {type(x).__name__}")


def encode_embeddings(x, nonpad, model: FlowModel) -> LatentState:
    z = chain_forward(x, model.chain, model.scorer, nonpad)
    z.style_positions = style_positions(z, model)
    return z


def encode(seqs, model: FlowModel) -> LatentState:
    """Embed token sequences and push them through the chain."""
    batch = _as_batch(seqs)
    return encode_embeddings(model.embed(batch.ids), batch.nonpad, model)


def style_positions(z: LatentState, model: FlowModel, source: str | None = None) -> np.ndarray:
    """Style mask used for disentangling, scored on the input or on the latent."""
    source = source or model.config.disentangle_source
    if source == "tokens" and z.input_weights is not None:
        weights = z.input_weights
    elif source == "tokens" and model.config.split_mode == "parity":
        return z.partitions[0]
    else:
        weights = model.scorer.token_weights(z.values.data, z.nonpad)
    return split_mask(weights, model.config.rho, z.nonpad)


def disentangle(z: LatentState, model: FlowModel | None = None, b: int = 0):
    """(z_c, z_s, (content_idx, style_idx)) for sentence ``b`` of a latent batch."""
    if z.style_positions is None:
        if model is None:
            raise ContractError("latent carries no style positions and no model was given")
        z.style_positions = style_positions(z, model)
    content, style = z.positions(b)
    rows = z.values[b]
    return ad.gather_rows(rows, content), ad.gather_rows(rows, style), (content, style)


def fuse(z_c, z_s, positions) -> Tensor:
    """Interleave content rows and style rows back into sentence order."""
    content, style = (np.asarray(p, dtype=np.int64) for p in positions)
    z_c, z_s = ad.as_tensor(z_c), ad.as_tensor(z_s)
    if z_c.shape[0] != len(content) or z_s.shape[0] != len(style):
        raise ContractError(f"fuse: {z_c.shape[0]}/{z_s.shape[0]} rows for "
                            f"{len(content)}/{len(style)} positions")
    if z_c.shape[1:] != z_s.shape[1:]:
        raise DimensionError(f"fuse: row shapes {z_c.shape} and {z_s.shape} differ")
    n = len(content) + len(style)
    return ad.scatter_rows(z_c, content, n) + ad.scatter_rows(z_s, style, n)


def normalize_rows(rows, eps: float = 1e-6) -> Tensor:
    rows = ad.as_tensor(rows)
    mu = ad.mean_last(rows)
    var = ad.var_last(rows)
    return (rows - mu) / ad.sqrt(var + eps)


def conditional_layer_norm(rows, style, table: StyleTable, eps: float = 1e-6, positions=None) -> Tensor:
    """``gamma[style] * N(rows) + beta[style]`` with N normalizing each row.

    ``rows`` is (n, D) for one sentence with an integer ``style`` or (B, L, D)
    with one style id per sentence.  ``positions`` keeps only those rows.
    """
    rows = ad.as_tensor(rows)
    normed = normalize_rows(rows, eps)
    if rows.ndim == 3:
        gamma, beta = table.rows(np.asarray(style).reshape(-1))
        B, _, D = rows.shape
        out = normed * gamma.reshape(B, 1, D) + beta.reshape(B, 1, D)
    else:
        gamma, beta = table.rows([int(style)])
        out = normed * gamma + beta
    if positions is not None:
        out = ad.gather_rows(out, np.asarray(positions, dtype=np.int64))
    return out


def styled_latent(z: LatentState, styles, model: FlowModel) -> Tensor:
    """Latent with style rows replaced by conditional layer norm for ``styles``."""
    cfg = model.config
    sel = (z.style_positions & z.nonpad)[..., None]
    if cfg.cln_reduce == "mean":
        content = (z.nonpad & ~z.style_positions)[..., None]
        pooled = ad.sum_(ad.where(content, z.values, 0.0), axis=1, keepdims=True) / content.sum(axis=1, keepdims=True)
        new = conditional_layer_norm(pooled, styles, model.table, cfg.cln_eps)
    else:
        new = conditional_layer_norm(z.values, styles, model.table, cfg.cln_eps)
    return ad.where(sel, new, z.values)


def decode_tokens(emb, vocab_embeddings: np.ndarray, chunk: int = 4096) -> np.ndarray:
    """Nearest vocabulary row by Euclidean distance; ties go to the smaller id."""
    e = emb.data if isinstance(emb, Tensor) else np.asarray(emb, dtype=np.float64)
    flat = e.reshape(-1, e.shape[-1])
    out = np.empty(len(flat), dtype=np.int64)
    for start in range(0, len(flat), chunk):
        rows = flat[start:start + chunk]
        diff = rows[:, None, :] - vocab_embeddings[None, :, :]
        out[start:start + chunk] = np.argmin(np.einsum("nvd,nvd->nv", diff, diff), axis=1)
    return out.reshape(e.shape[:-1])


@dataclass
class TransferRecord:
    source: np.ndarray
    source_style: int
    target_style: int
    latent: LatentState
    fused: Tensor
    output: np.ndarray
    partitions: list = field(default_factory=list)


def transfer_batch(batch: Batch, targets, model: FlowModel, keep_style: bool = False):
    """Continuous transfer of a batch; returns (latent, fused, output embeddings)."""
    targets = np.broadcast_to(np.asarray(targets, dtype=np.int64), (batch.size,))
    z = encode(batch, model)
    fused = z.values if keep_style else styled_latent(z, targets, model)
    out = chain_inverse(fused, model.chain, z.partitions, z.nonpad)
    return z, fused, out


def transfer(seqs, target_style, model: FlowModel, keep_style: bool = False, batch_size: int = 128):
    """Transfer sentences to ``target_style``; one :class:`TransferRecord` each.

    ``keep_style`` fuses the original style rows back instead of the
    conditional-layer-norm output, which makes the whole path the identity.
    """
    single = isinstance(seqs, TokenSequence)
    seqs = [seqs] if single else list(seqs)
    targets = np.broadcast_to(np.asarray(target_style, dtype=np.int64), (len(seqs),))
    records = []
    with ad.no_grad():
        for start in range(0, len(seqs), batch_size):
            chunk = seqs[start:start + batch_size]
            batch = make_batch(chunk)
            z, fused, out = transfer_batch(batch, targets[start:start + batch_size], model, keep_style)
            ids = decode_tokens(out, model.embedding)
            for i, seq in enumerate(chunk):
                n = len(seq)
                latent = LatentState(
                    values=Tensor(z.values.data[i:i + 1, :n]), nonpad=z.nonpad[i:i + 1, :n],
                    partitions=[p[i:i + 1, :n] for p in z.partitions],
                    logdet=Tensor(z.logdet.data[i:i + 1]),
                    style_positions=z.style_positions[i:i + 1, :n])
                records.append(TransferRecord(
                    source=seq.ids, source_style=seq.label, target_style=int(targets[start + i]),
                    latent=latent, fused=Tensor(fused.data[i, :n]), output=ids[i, :n],
                    partitions=latent.partitions))
    return records[0] if single else records


def reconstruct(seqs, model: FlowModel, batch_size: int = 128) -> list[np.ndarray]:
    """Same-style reconstruction (conditional layer norm with the source style)."""
    seqs = list(seqs)
    outs = []
    with ad.no_grad():
        for start in range(0, len(seqs), batch_size):
            chunk = seqs[start:start + batch_size]
            batch = make_batch(chunk)
            _, _, out = transfer_batch(batch, batch.labels, model)
            ids = decode_tokens(out, model.embedding)
            outs.extend(ids[i, :len(s)] for i, s in enumerate(chunk))
    return outs
