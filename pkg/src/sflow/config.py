"""Flat ``key = value`` run configuration with typed, range-checked keys."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

from .errors import ConfigError


@dataclass(frozen=True)
class Key:
    kind: type
    default: Any
    help: str
    check: Callable[[Any], bool] | None = None
    choices: tuple = ()


def _pos(v) -> bool:
    return v > 0


def _nonneg(v) -> bool:
    return v >= 0


def _unit(v) -> bool:
    return 0 < v < 1


SCHEMA: dict[str, Key] = {
    "workspace": Key(str, ".", "root that relative paths resolve against and are recorded from"),
    "seed": Key(int, 0, "master seed"),
    "threads": Key(int, 1, "BLAS threads (1 keeps runs bit-reproducible)", _pos),
    # data
    "data.train": Key(str, "data/train.tsv", "training corpus TSV (label<TAB>sentence)"),
    "data.test": Key(str, "data/test.tsv", "held-out corpus TSV"),
    "data.lowercase": Key(bool, True, "lowercase sentences when reading"),
    "data.min_count": Key(int, 1, "minimum token count to enter the vocabulary", _pos),
    "synthetic.n_per_style": Key(int, 1000, "synthetic training rows per style", _pos),
    "synthetic.test_per_style": Key(int, 100, "synthetic held-out rows per style", _pos),
    "synthetic.vocab_size": Key(int, 200, "synthetic word types (>= 50)", lambda v: v >= 50),
    # scorer
    "scorer.path": Key(str, "runs/scorer.ckpt", "attention scorer checkpoint"),
    "scorer.eval_path": Key(str, "runs/eval_scorer.ckpt", "separate evaluation classifier checkpoint"),
    "scorer.hidden": Key(int, 16, "GRU hidden size per direction", _pos),
    "scorer.epochs": Key(int, 8, "scorer training epochs", _pos),
    "scorer.lr": Key(float, 1e-2, "scorer learning rate", _pos),
    "scorer.batch_size": Key(int, 32, "scorer batch size", _pos),
    "scorer.substitute": Key(float, 0.3, "word-substitution noise rate for the flow's scorer",
                             lambda v: 0 <= v < 1),
    "scorer.state_dropout": Key(float, 0.5, "per-sentence rate of hiding GRU states from the head",
                                lambda v: 0 <= v < 1),
    "scorer.holdout": Key(float, 0.1, "fraction held out from scorer training", lambda v: 0 <= v < 1),
    # model
    "model.dim": Key(int, 256, "embedding / latent / Transformer width", _pos),
    "model.heads": Key(int, 4, "attention heads per coupling block", _pos),
    "model.ffn_dim": Key(int, 256, "feed-forward width in coupling blocks", _pos),
    "model.chain_length": Key(int, 8, "number of coupling layers", _pos),
    "model.rho": Key(float, 0.25, "fraction of tokens treated as style", _unit),
    "model.cln_eps": Key(float, 1e-6, "epsilon in the conditional layer norm", _pos),
    "model.cln_reduce": Key(str, "select", "rows fed to style slots", choices=("select", "mean")),
    "model.split_mode": Key(str, "attention", "token split rule", choices=("attention", "parity")),
    "model.partition_source": Key(str, "layer", "score each layer input or the chain input once",
                                  choices=("layer", "input")),
    "model.disentangle_source": Key(str, "tokens", "score style positions on tokens or on the latent",
                                    choices=("tokens", "latent")),
    # training
    "train.checkpoint": Key(str, "runs/model.ckpt", "model checkpoint written by train"),
    "train.metrics": Key(str, "runs/metrics.csv", "per-step loss log"),
    "train.lr": Key(float, 1e-3, "learning rate", _pos),
    "train.batch_size": Key(int, 32, "batch size", _pos),
    "train.epochs": Key(int, 10, "epochs", _nonneg),
    "train.max_steps": Key(int, 0, "stop after this many steps (0 = no cap)", _nonneg),
    "train.lambda_self": Key(float, 0.5, "weight of the self-reconstruction loss", _nonneg),
    "train.lambda_cycle": Key(float, 0.5, "weight of the cycle loss", _nonneg),
    "train.lambda_content": Key(float, 1.0, "weight of the content loss", _nonneg),
    "train.lambda_style": Key(float, 1.0, "weight of the style loss", _nonneg),
    "train.style_decoding": Key(str, "continuous", "what the style classifier sees during training",
                                choices=("continuous", "straight_through", "soft_straight_through")),
    "train.decode_temperature": Key(float, 4.0, "softmax temperature of soft_straight_through gradients", _pos),
    "train.checkpoint_every": Key(int, 0, "save every N steps (0 = only at the end)", _nonneg),
    "train.resume": Key(bool, False, "continue from train.checkpoint if it exists"),
    "train.augmented": Key(str, "", "augmented corpus to mix into training (empty = none)"),
    "train.mix_ratio": Key(float, 0.25, "augmented rows added per training row", _nonneg),
    # transfer
    "transfer.input": Key(str, "data/test.tsv", "sentences to transfer"),
    "transfer.output": Key(str, "runs/transfer.tsv", "transfer output TSV"),
    "transfer.target": Key(str, "opposite", "target style: opposite, negative, positive, 0 or 1"),
    "transfer.keep_style": Key(bool, False, "fuse the original style rows back (round-trip check)"),
    # augmentation
    "augment.input": Key(str, "data/train.tsv", "sentences to augment"),
    "augment.output": Key(str, "runs/augmented.tsv", "augmented corpus TSV (sidecar .csv alongside)"),
    "augment.epsilon": Key(float, 0.1, "latent noise scale", _nonneg),
    "augment.n": Key(int, 1, "variants per input sentence", _pos),
    "augment.content_only": Key(bool, False, "perturb content positions only"),
    # evaluation
    "eval.transfer": Key(str, "runs/transfer.tsv", "transfer output to score"),
    "eval.references": Key(str, "", "human references, one per line (empty = no ref_bleu)"),
    "eval.output": Key(str, "runs/metrics.txt", "metrics report"),
    "eval.lm_order": Key(int, 5, "n-gram order of the fluency language model", _pos),
}


def _parse(key: str, text: str):
    spec = SCHEMA[key]
    text = text.strip()
    try:
        if spec.kind is bool:
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            value = low in ("true", "1", "yes")
        else:
            value = spec.kind(text)
    except ValueError:
        raise ConfigError(f"{key}: cannot read {text!r} as {spec.kind.__name__}") from None
    _validate(key, value)
    return value


def _validate(key: str, value) -> None:
    spec = SCHEMA[key]
    if spec.choices and value not in spec.choices:
        raise ConfigError(f"{key}: {value!r} not one of {', '.join(spec.choices)}")
    if spec.check is not None and not spec.check(value):
        raise ConfigError(f"{key}: value {value!r} out of range")


class Config:
    """Every schema key with its default, overridden by a file and then by flags."""

    def __init__(self, values: dict | None = None, base_dir: Path | None = None):
        self.values = {k: s.default for k, s in SCHEMA.items()}
        self.base_dir = Path(base_dir or ".")
        for k, v in (values or {}).items():
            self.set(k, v)

    def set(self, key: str, value) -> None:
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        if isinstance(value, str):
            value = _parse(key, value)
        else:
            kind = SCHEMA[key].kind
            if kind is float and isinstance(value, int) and not isinstance(value, bool):
                value = float(value)
            if not isinstance(value, kind) or (kind is int and isinstance(value, bool)):
                raise ConfigError(f"{key}: expected {kind.__name__}, got {type(value).__name__}")
            _validate(key, value)
        self.values[key] = value

    def __getitem__(self, key: str):
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        return self.values[key]

    @property
    def workspace(self) -> Path:
        ws = Path(self.values["workspace"])
        return ws if ws.is_absolute() else (self.base_dir / ws).resolve()

    def path(self, key: str) -> Path:
        """Config path resolved against the workspace root."""
        p = Path(self[key])
        return p if p.is_absolute() else self.workspace / p

    def relative(self, path) -> str:
        """``path`` as recorded in outputs: relative to the workspace when inside it."""
        path = Path(path).resolve()
        try:
            return path.relative_to(self.workspace).as_posix()
        except ValueError:
            return path.as_posix()

    def dump(self) -> str:
        return "".join(f"{k} = {_format(v)}\n" for k, v in self.values.items())


def _format(v) -> str:
    return str(v).lower() if isinstance(v, bool) else str(v)


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}: line {lineno}: expected key = value")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"{source}: line {lineno}: unknown config key {key!r}")
        out[key] = value
    return out


def load_config(path=None, overrides: dict | None = None) -> Config:
    """Read a config file (if given) and apply ``overrides`` on top."""
    values: dict = {}
    base = Path(".")
    if path is not None:
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        values.update(parse_config_text(text, str(path)))
        base = path.parent
    cfg = Config(base_dir=base)
    for k, v in values.items():
        cfg.set(k, v)
    for k, v in (overrides or {}).items():
        cfg.set(k, v)
    return cfg
