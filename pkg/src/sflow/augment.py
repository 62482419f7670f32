"""New sentences from Gaussian noise added to flow latents and mapped back."""
from __future__ import annotations

import csv
from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import BOS, EOS, PAD, Corpus, TokenSequence, make_batch
from .errors import ConfigError
from .flow import LatentState, chain_inverse
from .scorer import Scorer
from .transfer import FlowModel, decode_tokens, encode


@dataclass(frozen=True)
class PerturbationConfig:
    epsilon: float = 0.1
    n: int = 1
    seed: int = 0
    content_only: bool = False

    def __post_init__(self):
        if not self.epsilon >= 0:
            raise ConfigError(f"perturbation scale must be nonnegative, got {self.epsilon}")
        if self.n < 1:
            raise ConfigError("need at least one variant per input")


@dataclass
class AugmentedSample:
    sequence: TokenSequence
    source_index: int
    variant: int
    epsilon: float
    label_preserved: bool | None = None
    degenerate: bool = False


def perturb_latent(z: LatentState, epsilon: float, rng: np.random.Generator,
                   content_only: bool = False) -> LatentState:
    """``values + epsilon * N(0, I)`` on non-padding rows; the log-det goes stale.

    The noise is drawn for the full value shape before masking, so the draws
    do not depend on the latent itself.
    """
    if epsilon < 0:
        raise ConfigError(f"perturbation scale must be nonnegative, got {epsilon}")
    noise = rng.standard_normal(z.values.shape)
    if epsilon == 0:
        return replace(z, values=Tensor(z.values.data.copy()), stale=True)
    mask = z.nonpad
    if content_only:
        if z.style_positions is None:
            raise ConfigError("content-only perturbation needs disentangled style positions")
        mask = mask & ~z.style_positions
    values = z.values.data + epsilon * noise * mask[..., None]
    return replace(z, values=Tensor(values), stale=True)


def _sentence_noise(batch_nonpad: np.ndarray, dim: int, rows, variant: int, seed: int) -> np.ndarray:
    """Per-sentence draws keyed by (seed, row, variant), independent of batching."""
    B, L = batch_nonpad.shape
    noise = np.zeros((B, L, dim))
    for i, row in enumerate(rows):
        n = int(batch_nonpad[i].sum())
        noise[i, :n] = np.random.default_rng([seed, row, variant]).standard_normal((n, dim))
    return noise


def augment(seqs, model: FlowModel, config: PerturbationConfig, classifier: Scorer | None = None,
            batch_size: int = 128) -> list[AugmentedSample]:
    """``config.n`` perturbed reconstructions of every sentence, in input order."""
    seqs = list(seqs)
    out: list[AugmentedSample] = []
    judge = classifier or model.style_classifier
    with ad.no_grad():
        for start in range(0, len(seqs), batch_size):
            chunk = seqs[start:start + batch_size]
            batch = make_batch(chunk)
            z = encode(batch, model)
            rows = range(start, start + len(chunk))
            per_variant = []
            for v in range(config.n):
                mask = z.nonpad if not config.content_only else z.nonpad & ~z.style_positions
                noise = _sentence_noise(z.nonpad, z.values.shape[-1], rows, v, config.seed)
                values = z.values.data + config.epsilon * noise * mask[..., None]
                x = chain_inverse(Tensor(values), model.chain, z.partitions, z.nonpad)
                per_variant.append(decode_tokens(x, model.embedding))
            for i, seq in enumerate(chunk):
                n = len(seq)
                for v in range(config.n):
                    ids = per_variant[v][i, :n].copy()
                    out.append(AugmentedSample(
                        TokenSequence(ids, seq.label), start + i, v, config.epsilon,
                        degenerate=bool(np.isin(ids, (PAD, BOS, EOS)).all())))
    if judge is not None and out:
        for s0 in range(0, len(out), batch_size):
            part = out[s0:s0 + batch_size]
            b = make_batch([s.sequence for s in part])
            pred = judge.predict(b.ids, b.nonpad)
            for s, p in zip(part, pred):
                s.label_preserved = bool(p == s.sequence.label)
    return out


def write_augmented(path, sidecar_path, samples: list[AugmentedSample], corpus_vocab) -> None:
    """Corpus TSV plus ``source_line,variant_index,epsilon,label_preserved`` CSV."""
    with open(path, "w", encoding="utf-8") as f:
        for s in samples:
            f.write(f"{s.sequence.label}\t{corpus_vocab.detokenize(s.sequence.ids)}\n")
    with open(sidecar_path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["source_line", "variant_index", "epsilon", "label_preserved", "degenerate"])
        for s in samples:
            lp = "" if s.label_preserved is None else int(s.label_preserved)
            w.writerow([s.source_index + 1, s.variant, repr(s.epsilon), lp, int(s.degenerate)])


def mix_corpus(train: Corpus, extra: Corpus, ratio: float = 0.25, seed: int = 0) -> Corpus:
    """Training rows plus ``round(ratio * len(train))`` rows drawn from ``extra``."""
    if ratio < 0:
        raise ConfigError("mixing ratio must be nonnegative")
    k = min(int(round(ratio * len(train))), len(extra))
    pick = np.random.default_rng([seed, 7]).choice(len(extra), size=k, replace=False)
    return Corpus(train.rows + [extra.rows[i] for i in sorted(pick)], train.vocab, train.styles)
