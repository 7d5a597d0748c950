"""Flat ``key=value`` run configuration.

A config file holds one ``key = value`` per line; ``#`` starts a comment.
Command-line flags override file values. Unknown keys and out-of-range
values raise :class:`ConfigInvalid` before any command touches the disk.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

from ..errors import ConfigInvalid
from ..trainers import Toggles, TrainConfig

TOGGLE_KEYS = ("rf", "is", "pm", "ub", "lb", "pb", "es")


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _clip(text: str):
    t = text.strip().lower()
    return None if t in ("none", "off", "0") else float(t)


@dataclass(frozen=True)
class Key:
    parse: object
    default: object
    check: object = None  # value -> bool
    doc: str = ""


def _pos(v):
    return v > 0


def _nonneg(v):
    return v >= 0


SCHEMA = {
    "data_dir": Key(str, "data", None, "dataset directory (train/val/test.jsonl)"),
    "out_dir": Key(str, "runs", None, "directory for checkpoints and CSVs"),
    "seed": Key(int, 0, lambda v: 0 <= v < 2**64, "master seed"),
    "n_train": Key(int, 3000, _pos, "training grids"),
    "n_val": Key(int, 1000, _pos, "validation grids"),
    "n_test": Key(int, 1000, _pos, "test grids"),
    "hidden": Key(int, 64, _pos, "LSTM units"),
    "embed": Key(int, 16, _pos, "token embedding size"),
    "pretrain_epochs": Key(int, 15, _nonneg, "maximum-likelihood epochs"),
    "pretrain_lr": Key(float, 1e-3, _pos, "pretraining step size"),
    "pretrain_optimizer": Key(str, "adam", lambda v: v in ("sgd", "adam"), "sgd or adam"),
    "batch_size": Key(int, 16, _pos, "pretraining minibatch"),
    "epochs": Key(int, 30, _nonneg, "RL epochs"),
    "episodes_per_epoch": Key(int, 1500, _pos, "rollouts per RL epoch"),
    "lr": Key(float, 1e-3, _pos, "RL step size"),
    "optimizer": Key(str, "sgd", lambda v: v in ("sgd", "adam"), "RL optimizer"),
    "clip": Key(_clip, None, lambda v: v is None or v > 0, "global gradient-norm clip, or none"),
    "omega_max": Key(float, 10.0, lambda v: v >= 1 and math.isfinite(v), "importance-weight bound"),
    "n_max": Key(int, 2, _nonneg, "stale retention passes before stopping"),
    "fixed_passes": Key(int, 3, _pos, "retention passes when early stopping is off"),
    "max_passes": Key(int, 20, _pos, "cap on retention passes per epoch"),
    "baseline_decay": Key(float, 0.99, lambda v: 0 <= v <= 1, "reward EMA decay"),
    "max_rounds": Key(int, 4, lambda v: 1 <= v <= 16, "question rounds per game"),
    "max_qlen": Key(int, 6, lambda v: 2 <= v <= 32, "tokens per question"),
    "eval_seed": Key(int, 12345, _nonneg, "seed for validation/test games"),
    "ablate_epochs": Key(int, 10, _nonneg, "RL epochs per ablation row"),
    "checkpoint": Key(str, "", None, "checkpoint to start from or evaluate"),
    "split": Key(str, "test", lambda v: v in ("train", "val", "test"), "split for eval"),
    "wall_clock": Key(_bool, False, None, "record wall time in metrics (breaks byte-identity)"),
}
for _t in TOGGLE_KEYS:
    SCHEMA[f"toggles.{_t}"] = Key(_bool, True, None, f"{_t.upper()} component")


class RunConfig:
    """Validated flat configuration. Keys without dots read as attributes."""

    def __init__(self, values: dict | None = None):
        self._values = {k: spec.default for k, spec in SCHEMA.items()}
        for key, raw in (values or {}).items():
            self.set(key, raw)

    def set(self, key: str, raw) -> None:
        if key not in SCHEMA:
            raise ConfigInvalid(f"unknown config key {key!r}")
        spec = SCHEMA[key]
        try:
            value = spec.parse(raw) if isinstance(raw, str) else raw
            if spec.parse in (int, float) and isinstance(value, bool):
                raise ValueError("boolean given for a number")
            if spec.parse is int:
                if value != int(value):
                    raise ValueError("not an integer")
                value = int(value)
            if spec.parse is float:
                value = float(value)
        except (TypeError, ValueError) as exc:
            raise ConfigInvalid(f"{key}: {exc}") from None
        if spec.check is not None and not spec.check(value):
            raise ConfigInvalid(f"{key}: value {value!r} out of range")
        self._values[key] = value

    def __getitem__(self, key):
        return self._values[key]

    def __getattr__(self, name):
        values = self.__dict__.get("_values", {})
        if name in values:
            return values[name]
        raise AttributeError(name)

    def items(self):
        return self._values.items()

    def toggles(self) -> Toggles:
        return Toggles(*(self._values[f"toggles.{t}"] for t in TOGGLE_KEYS))

    def train_config(self, mode: str, toggles: Toggles | None = None, epochs: int | None = None) -> TrainConfig:
        if toggles is None:
            toggles = Toggles.reinforce() if mode == "reinforce" else self.toggles()
        cfg = TrainConfig(
            lr=self.lr,
            optimizer=self.optimizer,
            omega_max=self.omega_max,
            n_max=self.n_max,
            epochs=self.epochs if epochs is None else epochs,
            episodes_per_epoch=self.episodes_per_epoch,
            baseline_decay=self.baseline_decay,
            toggles=toggles,
            fixed_passes=self.fixed_passes,
            max_passes=self.max_passes,
            max_rounds=self.max_rounds,
            max_qlen=self.max_qlen,
            clip=self.clip,
            seed=self.seed,
            eval_seed=self.eval_seed,
            wall_clock=self.wall_clock,
        )
        cfg.validate()
        return cfg

    def dump(self) -> str:
        lines = []
        for k, v in self._values.items():
            if v is None:
                v = "none"
            elif isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{k} = {v}")
        return "\n".join(lines) + "\n"


def parse_config_text(text: str, source: str = "<config>") -> dict:
    values = {}
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigInvalid(f"{source}:{n}: expected key = value")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigInvalid(f"{source}:{n}: unknown config key {key!r}")
        values[key] = value
    return values


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """File values first, then *overrides* (flags win)."""
    values = {}
    if path is not None:
        p = Path(path)
        try:
            text = p.read_text()
        except OSError as exc:
            raise ConfigInvalid(f"cannot read config {p}: {exc.strerror}") from None
        values.update(parse_config_text(text, str(p)))
    values.update(overrides or {})
    return RunConfig(values)
