"""Command-line entry point: scorer pretraining, flow training, transfer,
augmentation and evaluation driven by one flat config file."""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .augment import PerturbationConfig, augment, mix_corpus, write_augmented
from .checkpoint import load_model, load_scorer, save_scorer
from .config import SCHEMA, Config, load_config
from .data import (Corpus, TokenSequence, Vocabulary, generate_synthetic_corpus,
                   load_corpus, make_batch, parse_label, read_tsv, write_corpus)
from .errors import ConfigError, DataError, SFlowError
from .losses import LossWeights
from .metrics import BLEU_NOTE, LM_NOTE, corpus_bleu, perplexity, style_accuracy, train_lm
from .scorer import train_scorer
from .training import TrainConfig, Trainer
from .transfer import FlowModel, ModelConfig, transfer

EXIT_CODES = {"config": 2, "data": 3, "checkpoint": 4, "numeric": 5, "contract": 6,
              "dimension": 6, "vocabulary": 3, "io": 7}

COMMON_KEYS = ("workspace", "seed", "threads")
COMMAND_KEYS = {
    "make-synthetic": ("data.train", "data.test", "synthetic.n_per_style", "synthetic.test_per_style",
                       "synthetic.vocab_size"),
    "train-scorer": ("data.train", "data.lowercase", "data.min_count", "model.dim", "scorer.path",
                     "scorer.eval_path", "scorer.hidden", "scorer.epochs", "scorer.lr",
                     "scorer.batch_size", "scorer.holdout", "scorer.substitute", "scorer.state_dropout"),
    "train": ("data.train", "data.lowercase", "scorer.path") + tuple(k for k in SCHEMA if k.startswith(("model.", "train."))),
    "transfer": ("data.lowercase", "train.checkpoint", "transfer.input", "transfer.output",
                 "transfer.target", "transfer.keep_style"),
    "augment": ("data.lowercase", "train.checkpoint", "scorer.eval_path", "augment.input",
                "augment.output", "augment.epsilon", "augment.n", "augment.content_only"),
    "eval": ("data.train", "data.lowercase", "scorer.eval_path", "eval.transfer", "eval.references",
             "eval.output", "eval.lm_order"),
}


def _log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


# --- helpers -------------------------------------------------------------------

def _model_config(cfg: Config) -> ModelConfig:
    return ModelConfig(dim=cfg["model.dim"], heads=cfg["model.heads"], ffn_dim=cfg["model.ffn_dim"],
                       chain_length=cfg["model.chain_length"], rho=cfg["model.rho"],
                       cln_eps=cfg["model.cln_eps"], cln_reduce=cfg["model.cln_reduce"],
                       split_mode=cfg["model.split_mode"],
                       partition_source=cfg["model.partition_source"],
                       disentangle_source=cfg["model.disentangle_source"])


def _train_config(cfg: Config) -> TrainConfig:
    return TrainConfig(
        lr=cfg["train.lr"], batch_size=cfg["train.batch_size"], epochs=cfg["train.epochs"],
        max_steps=cfg["train.max_steps"] or None, seed=cfg["seed"],
        weights=LossWeights(cfg["train.lambda_self"], cfg["train.lambda_cycle"],
                            cfg["train.lambda_content"], cfg["train.lambda_style"]),
        style_decoding=cfg["train.style_decoding"], decode_temperature=cfg["train.decode_temperature"],
        checkpoint_every=cfg["train.checkpoint_every"])


def _read(cfg: Config, key: str, vocab: Vocabulary | None = None) -> Corpus:
    path = cfg.path(key)
    if not path.exists():
        raise DataError(f"{cfg.relative(path)}: no such file")
    return load_corpus(path, vocab, lowercase=cfg["data.lowercase"], min_count=cfg["data.min_count"])


def _ensure_parent(path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _target_styles(spec: str, labels) -> np.ndarray:
    labels = np.asarray(labels)
    if spec == "opposite":
        return 1 - labels
    return np.full(labels.shape, parse_label(spec))


# --- commands -------------------------------------------------------------------

def cmd_make_synthetic(cfg: Config, args) -> int:
    n, vs = cfg["synthetic.n_per_style"], cfg["synthetic.vocab_size"]
    train = generate_synthetic_corpus(cfg["seed"], n, vs)
    test = generate_synthetic_corpus(cfg["seed"] + 1000, cfg["synthetic.test_per_style"], vs)
    for key, corpus in (("data.train", train), ("data.test", test)):
        write_corpus(_ensure_parent(cfg.path(key)), corpus)
        _log(f"wrote {len(corpus)} rows to {cfg.relative(cfg.path(key))}")
    return 0


def cmd_train_scorer(cfg: Config, args) -> int:
    corpus = _read(cfg, "data.train")
    kw = dict(dim=cfg["model.dim"], hidden=cfg["scorer.hidden"], epochs=cfg["scorer.epochs"],
              lr=cfg["scorer.lr"], batch_size=cfg["scorer.batch_size"],
              state_dropout=cfg["scorer.state_dropout"], log=_log)
    scorer, rep = train_scorer(corpus, seed=cfg["seed"], holdout=cfg["scorer.holdout"],
                               substitute=cfg["scorer.substitute"], **kw)
    info = {"train": cfg.relative(cfg.path("data.train")), "seed": cfg["seed"],
            "train_accuracy": rep.train_accuracy, "heldout_accuracy": rep.heldout_accuracy}
    save_scorer(_ensure_parent(cfg.path("scorer.path")), scorer, corpus.vocab, info)
    _log(f"scorer: train acc {rep.train_accuracy:.4f}, held-out acc {rep.heldout_accuracy:.4f}")
    # evaluation classifier: different seed, half the corpus, no substitution noise
    eval_seed = cfg["seed"] + 1
    order = np.random.default_rng([eval_seed, 3]).permutation(len(corpus))
    half = corpus.subset(order[len(order) // 2:].tolist())
    ev, erep = train_scorer(half, seed=eval_seed, holdout=0.2, **kw)
    info = dict(info, seed=eval_seed, train_accuracy=erep.train_accuracy,
                heldout_accuracy=erep.heldout_accuracy, role="evaluation")
    save_scorer(_ensure_parent(cfg.path("scorer.eval_path")), ev, corpus.vocab, info)
    _log(f"evaluation classifier: held-out acc {erep.heldout_accuracy:.4f}")
    return 0


def cmd_train(cfg: Config, args) -> int:
    scorer, vocab, _ = load_scorer(cfg.path("scorer.path"))
    corpus = _read(cfg, "data.train", vocab)
    if cfg["train.augmented"]:
        extra = load_corpus(cfg.path("train.augmented"), vocab, lowercase=cfg["data.lowercase"])
        corpus = mix_corpus(corpus, extra, cfg["train.mix_ratio"], cfg["seed"])
    tc = _train_config(cfg)
    ckpt = _ensure_parent(cfg.path("train.checkpoint"))
    if cfg["train.resume"] and ckpt.exists():
        model, header, moments = load_model(ckpt)
        trainer = Trainer(model, corpus, tc, step=header["step"])
        trainer.optimizer.load_state(moments, header["optimizer_t"])
        _log(f"resuming at step {header['step']}")
    else:
        model = FlowModel(vocab, scorer, _model_config(cfg), rng=np.random.default_rng(cfg["seed"]))
        trainer = Trainer(model, corpus, tc)
    trainer.info = {"train": cfg.relative(cfg.path("data.train"))}
    trainer.run(_ensure_parent(cfg.path("train.metrics")), ckpt, log=_log)
    _log(f"saved {cfg.relative(ckpt)} after {trainer.step} steps")
    return 0


def cmd_transfer(cfg: Config, args) -> int:
    model, _, _ = load_model(cfg.path("train.checkpoint"))
    corpus = _read(cfg, "transfer.input", model.vocab)
    targets = _target_styles(cfg["transfer.target"], [r.label for r in corpus.rows])
    records = transfer(corpus.rows, targets, model, keep_style=cfg["transfer.keep_style"])
    out = _ensure_parent(cfg.path("transfer.output"))
    with open(out, "w", encoding="utf-8") as f:
        for r in records:
            f.write(f"{r.source_style}\t{r.target_style}\t{model.vocab.detokenize(r.source)}\t"
                    f"{model.vocab.detokenize(r.output)}\n")
    _log(f"wrote {len(records)} transfers to {cfg.relative(out)}")
    return 0


def cmd_augment(cfg: Config, args) -> int:
    model, _, _ = load_model(cfg.path("train.checkpoint"))
    corpus = _read(cfg, "augment.input", model.vocab)
    judge = None
    if cfg.path("scorer.eval_path").exists():
        judge, _, _ = load_scorer(cfg.path("scorer.eval_path"))
    pc = PerturbationConfig(cfg["augment.epsilon"], cfg["augment.n"], cfg["seed"], cfg["augment.content_only"])
    samples = augment(corpus.rows, model, pc, classifier=judge)
    out = _ensure_parent(cfg.path("augment.output"))
    write_augmented(out, out.with_suffix(".csv"), samples, model.vocab)
    kept = np.mean([s.label_preserved for s in samples]) if judge is not None else float("nan")
    _log(f"wrote {len(samples)} samples to {cfg.relative(out)} (label kept {kept:.3f})")
    return 0


def read_transfer_file(path) -> list[tuple[int, int, list[str], list[str]]]:
    rows = []
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except FileNotFoundError:
        raise DataError(f"{path}: no such file") from None
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise DataError(f"{path}: line {lineno}: expected 4 tab-separated fields")
        rows.append((parse_label(parts[0], lineno), parse_label(parts[1], lineno),
                     parts[2].split(), parts[3].split()))
    if not rows:
        raise DataError(f"{path}: empty transfer file")
    return rows


def evaluate_transfers(rows, classifier, vocab: Vocabulary, lm, references=None) -> dict:
    outs = [TokenSequence(vocab.encode(o), t) for _, t, _, o in rows]
    preds = []
    for s in range(0, len(outs), 256):
        b = make_batch(outs[s:s + 256])
        preds.append(classifier.predict(b.ids, b.nonpad))
    report = {"acc": style_accuracy(np.concatenate(preds), [t for _, t, _, _ in rows]),
              "self_bleu": corpus_bleu([o for *_, o in rows], [[src] for _, _, src, _ in rows])}
    if references is not None:
        if len(references) != len(rows):
            raise DataError(f"{len(references)} references for {len(rows)} transfers")
        report["ref_bleu"] = corpus_bleu([o for *_, o in rows], [[r] for r in references])
    report["ppl"] = perplexity(lm, [o for *_, o in rows])
    report["source_ppl"] = perplexity(lm, [src for _, _, src, _ in rows])
    return report


def cmd_eval(cfg: Config, args) -> int:
    classifier, vocab, _ = load_scorer(cfg.path("scorer.eval_path"))
    lower = cfg["data.lowercase"]
    rows = read_transfer_file(cfg.path("eval.transfer"))
    if lower:
        rows = [(a, b, [t.lower() for t in s], [t.lower() for t in o]) for a, b, s, o in rows]
    refs = None
    if cfg["eval.references"]:
        ref_path = cfg.path("eval.references")
        if not ref_path.exists():
            raise DataError(f"{cfg.relative(ref_path)}: no such file")
        text = ref_path.read_text(encoding="utf-8")
        refs = [(line.lower() if lower else line).split() for line in text.splitlines()]
    lm = train_lm([toks for _, toks in read_tsv(cfg.path("data.train"), lower)], order=cfg["eval.lm_order"])
    report = evaluate_transfers(rows, classifier, vocab, lm, refs)
    out = _ensure_parent(cfg.path("eval.output"))
    header = [f"# {BLEU_NOTE}", f"# {LM_NOTE}".replace("order-5", f"order-{cfg['eval.lm_order']}"),
              "# acc: evaluation classifier trained separately from the training scorer",
              f"# transfer={cfg.relative(cfg.path('eval.transfer'))} "
              f"lm_corpus={cfg.relative(cfg.path('data.train'))}"]
    body = [f"{k}={v:.6f}" for k, v in report.items()]
    out.write_text("\n".join(header + body) + "\n", encoding="utf-8")
    print("\n".join(body))
    return 0


COMMANDS = {
    "make-synthetic": (cmd_make_synthetic, "write the synthetic two-style corpus"),
    "train-scorer": (cmd_train_scorer, "pretrain the attention scorer and the evaluation classifier"),
    "train": (cmd_train, "train the flow model"),
    "transfer": (cmd_transfer, "rewrite sentences in the target style"),
    "augment": (cmd_augment, "generate latent-noise variants of sentences"),
    "eval": (cmd_eval, "score a transfer output file"),
}


def _epilog(command: str) -> str:
    keys = COMMON_KEYS + COMMAND_KEYS[command]
    width = max(len(k) for k in keys)
    lines = [f"  {k:<{width}}  {SCHEMA[k].help} (default: {SCHEMA[k].default!r})" for k in keys]
    return "config keys read:\n" + "\n".join(lines)


def _common_flags(set_dest: str) -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    # SUPPRESS keeps a flag given before the command from being reset by the subparser
    common.add_argument("--config", default=argparse.SUPPRESS, help="flat key = value config file")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="overrides the seed key")
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS, help="overrides the threads key")
    common.add_argument("--set", dest=set_dest, action="append", default=argparse.SUPPRESS,
                        metavar="KEY=VALUE", help="override any config key (repeatable)")
    return common


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sflow", description=__doc__, parents=[_common_flags("set")])
    parser.add_argument("--version", action="version", version=f"sflow {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    after = _common_flags("set_after")  # separate list so both positions accumulate
    for name, (_, help_text) in COMMANDS.items():
        sub.add_parser(name, help=help_text, description=help_text, epilog=_epilog(name),
                       formatter_class=argparse.RawDescriptionHelpFormatter, parents=[after])
    return parser


def _overrides(args) -> dict:
    out = {}
    for item in getattr(args, "set", []) + getattr(args, "set_after", []):
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    for key in ("seed", "threads"):
        if hasattr(args, key):
            out[key] = str(getattr(args, key))
    return out


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(getattr(args, "config", None), _overrides(args))
        func, _ = COMMANDS[args.command]
        with threadpool_limits(limits=cfg["threads"]):
            return func(cfg, args)
    except SFlowError as e:
        print(f"error: category={e.category} message={e}", file=sys.stderr)
        return EXIT_CODES.get(e.category, 1)
    except OSError as e:
        print(f"error: category=io message={e}", file=sys.stderr)
        return EXIT_CODES["io"]


if __name__ == "__main__":
    sys.exit(main())
