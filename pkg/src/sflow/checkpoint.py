"""Single-file binary checkpoints.

Layout: the magic bytes ``SFLOW1``, a little-endian uint64 header length, a
UTF-8 JSON header, then raw little-endian float64 blocks in header order.
"""
from __future__ import annotations

import json
import os
import struct
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .autodiff import Adam
from .data import Vocabulary
from .errors import CheckpointError
from .scorer import Scorer
from .transfer import FlowModel, ModelConfig

MAGIC = b"SFLOW1"
VERSION = 1


def write_checkpoint(path, arrays: dict[str, np.ndarray], meta: dict) -> None:
    blocks = [{"name": k, "shape": list(np.shape(v))} for k, v in arrays.items()]
    header = dict(meta, version=VERSION, blocks=blocks)
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(raw)))
        f.write(raw)
        for v in arrays.values():
            f.write(np.ascontiguousarray(v, dtype="<f8").tobytes())
    os.replace(tmp, path)


def read_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    try:
        data = Path(path).read_bytes()
    except FileNotFoundError:
        raise CheckpointError(f"{path}: no such checkpoint") from None
    if not data.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    off = len(MAGIC)
    (n,) = struct.unpack_from("<Q", data, off)
    off += 8
    try:
        header = json.loads(data[off:off + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: unreadable header ({e})") from None
    off += n
    if header.get("version") != VERSION:
        raise CheckpointError(f"{path}: incompatible checkpoint version {header.get('version')}")
    arrays = {}
    for block in header["blocks"]:
        shape = tuple(block["shape"])
        size = int(np.prod(shape)) * 8
        if off + size > len(data):
            raise CheckpointError(f"{path}: truncated at block {block['name']}")
        arrays[block["name"]] = np.frombuffer(data, dtype="<f8", count=size // 8, offset=off).reshape(shape).copy()
        off += size
    if off != len(data):
        raise CheckpointError(f"{path}: {len(data) - off} trailing bytes")
    return arrays, header


def rng_state(seed: int, step: int) -> dict:
    """State of the generator that drives the next training step."""
    return np.random.default_rng([seed, step]).bit_generator.state


# --- scorer -------------------------------------------------------------------

def save_scorer(path, scorer: Scorer, vocab: Vocabulary, meta: dict | None = None) -> None:
    header = {"kind": "scorer", "vocab": vocab.tokens(), "scorer": scorer.hyperparameters(),
              "info": meta or {}}
    write_checkpoint(path, scorer.state_arrays(), header)


def _build_scorer(hp: dict) -> Scorer:
    return Scorer(hp["vocab_size"], hp["dim"], hidden=hp["hidden"], attn_dim=hp["attn_dim"],
                  n_styles=hp["n_styles"])


def load_scorer(path) -> tuple[Scorer, Vocabulary, dict]:
    arrays, header = read_checkpoint(path)
    if header.get("kind") != "scorer":
        raise CheckpointError(f"{path}: expected a scorer checkpoint, found {header.get('kind')!r}")
    scorer = _build_scorer(header["scorer"])
    _load(scorer, arrays, path)
    scorer.freeze()
    return scorer, Vocabulary.from_tokens(header["vocab"]), header


def _load(module, arrays, path) -> None:
    try:
        module.load_arrays(arrays)
    except (KeyError, ValueError) as e:
        raise CheckpointError(f"{path}: {e}") from None


# --- full model -----------------------------------------------------------------

def save_model(path, model: FlowModel, optimizer: Adam | None = None, step: int = 0,
               seed: int = 0, info: dict | None = None) -> None:
    arrays = dict(model.state_arrays())
    if optimizer is not None:
        arrays.update(optimizer.state())
    header = {
        "kind": "model", "vocab": model.vocab.tokens(), "config": asdict(model.config),
        "scorer": model.scorer.hyperparameters(),
        "classifier": model.classifier.hyperparameters() if hasattr(model, "classifier") else None,
        "step": step, "seed": seed, "optimizer_t": optimizer.t if optimizer else 0,
        "rng_state": rng_state(seed, step), "info": info or {},
    }
    write_checkpoint(path, arrays, header)


def load_model(path) -> tuple[FlowModel, dict, dict[str, np.ndarray]]:
    """(model, header, optimizer moment arrays)."""
    arrays, header = read_checkpoint(path)
    if header.get("kind") != "model":
        raise CheckpointError(f"{path}: expected a model checkpoint, found {header.get('kind')!r}")
    vocab = Vocabulary.from_tokens(header["vocab"])
    scorer = _build_scorer(header["scorer"])
    classifier = _build_scorer(header["classifier"]) if header.get("classifier") else None
    try:
        config = ModelConfig(**header["config"])
    except TypeError as e:
        raise CheckpointError(f"{path}: bad model config ({e})") from None
    model = FlowModel(vocab, scorer, config, classifier=classifier)
    _load(model, arrays, path)
    model.refresh()
    moments = {k: v for k, v in arrays.items() if k.startswith(("m.", "v."))}
    return model, header, moments
