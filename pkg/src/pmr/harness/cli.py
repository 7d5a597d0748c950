"""Command-line entry point: ``pmr <command> [options]``.

Exit codes: 0 success, 1 usage or configuration error, 2 I/O error
(missing or corrupt dataset/checkpoint), 3 training failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .. import game, nn
from ..errors import ConfigInvalid, CorruptRecord, MissingCheckpoint, MissingDataset, PMRError
from ..policy import QuestionerPolicy
from ..trainers import evaluate, metrics_csv, pmr_train, pretrain
from . import ablation
from .config import SCHEMA, RunConfig, load_config

log = logging.getLogger("pmr")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_TRAIN = 0, 1, 2, 3
COMMANDS = ("generate", "pretrain", "reinforce", "pmr", "ablate", "eval")

# short spellings for a few keys, besides the generated --<key> flags
ALIASES = {"n_train": ["--train"], "n_val": ["--val"], "n_test": ["--test"], "out_dir": ["--out"], "data_dir": ["--data"]}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _option_parent() -> argparse.ArgumentParser:
    parent = argparse.ArgumentParser(add_help=False)
    parent.add_argument("--config", default=argparse.SUPPRESS, help="flat key=value config file")
    parent.add_argument(
        "--set", action="append", default=argparse.SUPPRESS, metavar="KEY=VALUE", help="override any config key"
    )
    parent.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS, help="log progress")
    for key, spec in SCHEMA.items():
        flags = ["--" + key.replace("_", "-")] + ALIASES.get(key, [])
        parent.add_argument(*flags, dest=f"key:{key}", default=argparse.SUPPRESS, metavar="V", help=spec.doc)
    return parent


def build_parser() -> argparse.ArgumentParser:
    parent = _option_parent()
    parser = _Parser(prog="pmr", description="Positive memory retention on the symbolic number-guessing game.", parents=[parent])
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    helps = {
        "generate": "write train/val/test game records",
        "pretrain": "maximum-likelihood training on scripted games",
        "reinforce": "REINFORCE from a pretrained checkpoint",
        "pmr": "REINFORCE with positive memory retention",
        "ablate": "run the component ablation and omega_max sweep",
        "eval": "success rate of a checkpoint on a split",
    }
    for name in COMMANDS:
        sub.add_parser(name, parents=[parent], help=helps[name])
    return parser


def config_from_args(ns: argparse.Namespace) -> RunConfig:
    overrides = {}
    for item in getattr(ns, "set", []) or []:
        if "=" not in item:
            raise ConfigInvalid(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    for attr, value in vars(ns).items():
        if attr.startswith("key:"):
            overrides[attr[4:]] = value
    return load_config(getattr(ns, "config", None), overrides)


# -- helpers -----------------------------------------------------------------


def _write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def _out(cfg: RunConfig) -> Path:
    return Path(cfg.out_dir)


def _load_policy(path) -> QuestionerPolicy:
    return QuestionerPolicy(params=nn.load_checkpoint(path))


def _init_checkpoint(cfg: RunConfig) -> Path:
    return Path(cfg.checkpoint) if cfg.checkpoint else _out(cfg) / "pretrain.ckpt"


def _save_params(values: dict, like: QuestionerPolicy, path: Path) -> None:
    store = like.params.copy()
    store.set_values(values)
    path.parent.mkdir(parents=True, exist_ok=True)
    nn.save_checkpoint(store, path)


# -- commands ----------------------------------------------------------------


def cmd_generate(cfg: RunConfig) -> int:
    paths = game.generate_dataset(cfg.n_train, cfg.n_val, cfg.n_test, cfg.seed, cfg.data_dir)
    for name, path in paths.items():
        n = sum(1 for _ in open(path, encoding="utf-8"))
        print(f"{name}: {n} games -> {path}")
    return EXIT_OK


def cmd_pretrain(cfg: RunConfig) -> int:
    splits = game.load_splits(cfg.data_dir)
    policy = QuestionerPolicy(hidden=cfg.hidden, embed=cfg.embed, seed=cfg.seed)
    hist, best = pretrain(
        policy,
        splits,
        epochs=cfg.pretrain_epochs,
        lr=cfg.pretrain_lr,
        optimizer=cfg.pretrain_optimizer,
        batch_size=cfg.batch_size,
        seed=cfg.seed,
        eval_seed=cfg.eval_seed,
        max_rounds=cfg.max_rounds,
    )
    out = _out(cfg)
    _save_params(best, policy, out / "pretrain.ckpt")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("epoch", "train_perplexity", "val_perplexity", "val_success"))
    for h in hist:
        w.writerow((h.epoch, f"{h.train_perplexity:.6f}", f"{h.val_perplexity:.6f}", f"{h.val_success:.6f}"))
    _write_text(out / "pretrain_metrics.csv", buf.getvalue())
    policy.params.set_values(best)
    val = evaluate(policy, splits["val"], cfg.eval_seed, cfg.max_rounds, cfg.max_qlen)
    print(f"pretrained checkpoint -> {out / 'pretrain.ckpt'}  val_success={val:.4f}")
    return EXIT_OK


def cmd_train(cfg: RunConfig, mode: str) -> int:
    tcfg = cfg.train_config(mode)
    splits = game.load_splits(cfg.data_dir)
    policy = _load_policy(_init_checkpoint(cfg))
    res = pmr_train(tcfg, splits, policy)
    if not np.all([np.all(np.isfinite(v)) for v in policy.params.get_values().values()]):
        raise FloatingPointError("parameters became non-finite")
    out = _out(cfg)
    _write_text(out / f"{mode}_metrics.csv", metrics_csv(res.metrics))
    _save_params(res.best_params, policy, out / f"{mode}_best.ckpt")
    nn.save_checkpoint(policy.params, out / f"{mode}_last.ckpt")
    policy.params.set_values(res.best_params)
    test = evaluate(policy, splits["test"], cfg.eval_seed, cfg.max_rounds, cfg.max_qlen)
    print(f"{mode}: epochs={len(res.metrics)} initial_val={res.initial_val:.4f} best_val={res.best_val:.4f} test={test:.4f}")
    return EXIT_OK


def cmd_ablate(cfg: RunConfig) -> int:
    base = cfg.train_config("pmr", epochs=cfg.ablate_epochs)
    splits = game.load_splits(cfg.data_dir)
    init = _load_policy(_init_checkpoint(cfg)).params

    def progress(r):
        score = "failed" if r.failed else f"{r.test_success:.4f}"
        print(f"row {r.row.row_id:2d} {r.row.toggles.label():<22} omega_max={r.row.omega_max:g} test={score}", flush=True)

    results = ablation.run_ablation(base, splits, init, on_row=progress)
    out = _out(cfg)
    table = ablation.format_table(results)
    _write_text(out / "ablation.csv", ablation.ablation_csv(results))
    _write_text(out / "ablation.txt", table)
    print(table, end="")
    return EXIT_TRAIN if any(r.failed for r in results) else EXIT_OK


def cmd_eval(cfg: RunConfig) -> int:
    if not cfg.checkpoint:
        raise ConfigInvalid("eval needs --checkpoint")
    policy = _load_policy(cfg.checkpoint)
    records = game.read_records(os.path.join(cfg.data_dir, f"{cfg.split}.jsonl"))
    rate = evaluate(policy, records, cfg.eval_seed, cfg.max_rounds, cfg.max_qlen)
    print(f"{cfg.split}: success={rate:.4f} games={len(records)}")
    return EXIT_OK


def dispatch(command: str, cfg: RunConfig) -> int:
    if command == "generate":
        return cmd_generate(cfg)
    if command == "pretrain":
        return cmd_pretrain(cfg)
    if command in ("reinforce", "pmr"):
        return cmd_train(cfg, command)
    if command == "ablate":
        return cmd_ablate(cfg)
    return cmd_eval(cfg)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
        if ns.command is None:
            raise UsageError("a command is required: " + ", ".join(COMMANDS))
        cfg = config_from_args(ns)
    except (UsageError, ConfigInvalid) as exc:
        print(f"pmr: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if getattr(ns, "verbose", False) else logging.WARNING, format="%(message)s")
    try:
        with np.errstate(over="raise", invalid="raise", divide="ignore", under="ignore"):
            return dispatch(ns.command, cfg)
    except ConfigInvalid as exc:
        print(f"pmr: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (MissingDataset, MissingCheckpoint, CorruptRecord, OSError) as exc:
        print(f"pmr: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (PMRError, ArithmeticError, ValueError) as exc:
        print(f"pmr: training failed: {exc}", file=sys.stderr)
        return EXIT_TRAIN


if __name__ == "__main__":
    sys.exit(main())
