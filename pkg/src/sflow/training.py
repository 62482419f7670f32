"""Mini-batch optimization of the weighted objective, with metrics and checkpoints."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .checkpoint import save_model
from .data import Corpus
from .errors import ConfigError, DataError, NumericError
from .losses import STYLE_DECODINGS, LossWeights, compute_losses, opposite_styles
from .transfer import FlowModel

METRIC_FIELDS = ("step", "self", "cycle", "content", "style", "total", "lr")


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 32
    epochs: int = 10
    max_steps: int | None = None
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    style_decoding: str = "continuous"
    decode_temperature: float = 4.0
    checkpoint_every: int = 0

    def validate(self) -> None:
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")
        if not self.decode_temperature > 0:
            raise ConfigError("decode_temperature must be positive")
        if self.style_decoding not in STYLE_DECODINGS:
            raise ConfigError(f"unknown style decoding {self.style_decoding!r}")


class Trainer:
    """Deterministic trainer: batch order and style pairing depend only on (seed, step)."""

    def __init__(self, model: FlowModel, corpus: Corpus, config: TrainConfig,
                 optimizer: ad.Adam | None = None, step: int = 0):
        config.validate()
        if corpus.vocab_size != len(model.embedding):
            raise DataError(f"corpus vocabulary has {corpus.vocab_size} types, "
                            f"model embeds {len(model.embedding)}")
        if any(len(r) < 2 for r in corpus.rows):
            raise DataError("every training sentence needs at least 2 tokens")
        self.model = model
        self.corpus = corpus
        self.config = config
        self.optimizer = optimizer or ad.Adam(model.trainable(), lr=config.lr)
        self.step = step
        self.history: list[dict] = []
        self.info: dict = {}

    @property
    def steps_per_epoch(self) -> int:
        return math.ceil(len(self.corpus) / self.config.batch_size)

    @property
    def total_steps(self) -> int:
        n = self.steps_per_epoch * self.config.epochs
        return n if self.config.max_steps is None else min(n, self.config.max_steps)

    def batch_indices(self, step: int) -> np.ndarray:
        epoch, offset = divmod(step, self.steps_per_epoch)
        order = np.random.default_rng([self.config.seed, epoch]).permutation(len(self.corpus))
        bs = self.config.batch_size
        return order[offset * bs:(offset + 1) * bs]

    def train_step(self) -> dict:
        idx = self.batch_indices(self.step)
        batch = self.corpus.batch(idx)
        rng = np.random.default_rng([self.config.seed, self.step, 1])
        targets = opposite_styles(batch.labels, self.model.config.n_styles, rng)
        try:
            parts = compute_losses(batch, targets, self.model, self.config.weights,
                                   self.config.style_decoding, self.config.decode_temperature)
            if not np.isfinite(parts.total.data):
                raise NumericError("total loss is not finite")
            ad.backward(parts.total)
        except NumericError as e:
            raise NumericError(f"step {self.step}: {e}; offending batch rows "
                               f"{idx.tolist()}: {self._dump(batch)}") from None
        self.optimizer.step()
        self.step += 1
        row = {"step": self.step, **parts.values(), "lr": self.optimizer.lr}
        self.history.append(row)
        return row

    def _dump(self, batch) -> str:
        vocab = self.corpus.vocab
        return " | ".join(f"{lab}:{vocab.detokenize(ids[m])}"
                          for ids, m, lab in zip(batch.ids, batch.nonpad, batch.labels))

    def run(self, metrics_path=None, checkpoint_path=None, log=None) -> list[dict]:
        writer = None
        if metrics_path is not None:
            fresh = self.step == 0 or not Path(metrics_path).exists()
            fh = open(metrics_path, "w" if fresh else "a", newline="")
            writer = csv.DictWriter(fh, fieldnames=METRIC_FIELDS)
            if fresh:
                writer.writeheader()
        try:
            while self.step < self.total_steps:
                row = self.train_step()
                if writer is not None:
                    writer.writerow({k: _fmt(row[k]) for k in METRIC_FIELDS})
                if log is not None and (self.step % self.steps_per_epoch == 0 or self.step == self.total_steps):
                    log(f"step {self.step}/{self.total_steps} " +
                        " ".join(f"{k}={row[k]:.4f}" for k in METRIC_FIELDS[1:6]))
                every = self.config.checkpoint_every
                if checkpoint_path is not None and every and self.step % every == 0:
                    self.save(checkpoint_path)
        finally:
            if writer is not None:
                fh.close()
        if checkpoint_path is not None:
            self.save(checkpoint_path)
        return self.history

    def save(self, path) -> None:
        save_model(path, self.model, self.optimizer, self.step, self.config.seed, self.info)


def _fmt(v) -> str:
    return str(v) if isinstance(v, int) else repr(float(v))


def train(model: FlowModel, corpus: Corpus, config: TrainConfig, metrics_path=None,
          checkpoint_path=None, log=None) -> Trainer:
    trainer = Trainer(model, corpus, config)
    trainer.run(metrics_path, checkpoint_path, log)
    return trainer
