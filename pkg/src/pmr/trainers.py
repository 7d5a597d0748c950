"""Policy-gradient training: REINFORCE and positive memory retention.

The retention phase replays trajectories stored during the current epoch,
reweighting each by the ratio of its probability under the current policy to
its probability under the policy that generated it. Trajectories whose weight
falls outside ``[1/omega_max, omega_max]`` are skipped.
"""

from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import dataclass, field, fields

import numpy as np

from . import game
from .errors import ConfigInvalid, LengthMismatch, SupportMismatch
from .nn import Optimizer
from .policy import QuestionerPolicy, Trajectory, game_stream, mle_loss, play_batch, rollout, score

log = logging.getLogger(__name__)

# exp() overflows past this; larger weights are capped here
MAX_LOG_WEIGHT = 700.0

METRIC_COLUMNS = (
    "epoch",
    "env_samples",
    "train_success",
    "val_success",
    "memory_size",
    "retention_passes",
    "reuse_ratio",
    "wall_ms",
)


# -- small pieces ------------------------------------------------------------


def baseline_update(b: float, r: float, decay: float = 0.99) -> float:
    return decay * b + (1.0 - decay) * r


def log_importance_weight(p, q) -> float:
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise LengthMismatch(f"{p.shape} vs {q.shape}")
    # an underflowed probability gives -inf, a weight of exactly zero
    with np.errstate(divide="ignore"):
        return float(np.sum(np.log(p)) - np.sum(np.log(q)))


def importance_weight(p, q) -> float:
    return math.exp(log_importance_weight(p, q))


def in_trust_region(log_w: float, omega_max: float, upper: bool = True, lower: bool = True) -> bool:
    bound = math.log(omega_max)
    if upper and log_w > bound:
        return False
    if lower and log_w < -bound:
        return False
    return True


def trust_region_check(omega: float, omega_max: float, upper: bool = True, lower: bool = True) -> bool:
    return in_trust_region(math.log(omega), omega_max, upper, lower)


def _kl(p, m):
    nz = p > 0
    return float(np.sum(p[nz] * np.log(p[nz] / m[nz])))


def js_divergence(p, q) -> float:
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise SupportMismatch(f"{p.shape} vs {q.shape}")
    m = 0.5 * (p + q)
    return 0.5 * _kl(p, m) + 0.5 * _kl(q, m)


@dataclass
class MemoryEntry:
    grid: game.GridImage
    target_index: int
    tokens: tuple
    mask: tuple
    stored_probs: np.ndarray
    reward: int


class MemoryBuffer:
    def __init__(self, epoch: int = 0):
        self.entries: list[MemoryEntry] = []
        self.epoch = epoch

    def add(self, traj: Trajectory) -> None:
        self.entries.append(
            MemoryEntry(traj.grid, traj.target_index, traj.tokens, traj.mask, traj.action_probs().copy(), traj.reward)
        )

    def clear(self, epoch: int | None = None) -> None:
        self.entries = []
        if epoch is not None:
            self.epoch = epoch

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)


# -- configuration -----------------------------------------------------------


@dataclass
class Toggles:
    rf: bool = True
    is_: bool = True
    pm: bool = True
    ub: bool = True
    lb: bool = True
    pb: bool = True
    es: bool = True

    NAMES = ("rf", "is", "pm", "ub", "lb", "pb", "es")

    def as_tuple(self) -> tuple:
        return (self.rf, self.is_, self.pm, self.ub, self.lb, self.pb, self.es)

    def label(self) -> str:
        on = [n.upper() for n, v in zip(self.NAMES, self.as_tuple()) if v]
        return "+".join(on) if on else "-"

    @classmethod
    def reinforce(cls) -> "Toggles":
        return cls(True, False, False, False, False, False, False)


@dataclass
class TrainConfig:
    lr: float = 1e-3
    optimizer: str = "sgd"
    omega_max: float = 10.0
    n_max: int = 2
    epochs: int = 30
    episodes_per_epoch: int = 1500
    baseline_decay: float = 0.99
    toggles: Toggles = field(default_factory=Toggles)
    fixed_passes: int = 3
    max_passes: int = 20
    max_rounds: int = 4
    max_qlen: int = game.DEFAULT_MAX_QLEN
    clip: float | None = None
    shuffle_memory: bool = False
    seed: int = 0
    eval_seed: int = 12345
    wall_clock: bool = False

    def validate(self) -> None:
        t = self.toggles
        if self.omega_max < 1:
            raise ConfigInvalid(f"omega_max must be >= 1, got {self.omega_max}")
        if self.n_max < 0:
            raise ConfigInvalid(f"n_max must be >= 0, got {self.n_max}")
        if t.is_ and not t.rf:
            raise ConfigInvalid("importance sampling retention requires REINFORCE (rf)")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigInvalid(f"unknown optimizer {self.optimizer!r}")
        if self.lr <= 0 or self.epochs < 0 or self.episodes_per_epoch <= 0:
            raise ConfigInvalid("lr and episodes_per_epoch must be positive, epochs >= 0")
        if self.fixed_passes < 1 or self.max_passes < 1:
            raise ConfigInvalid("pass counts must be >= 1")
        if not 0 <= self.baseline_decay <= 1:
            raise ConfigInvalid("baseline_decay must lie in [0, 1]")
        if self.max_rounds < 1 or self.max_qlen < 2:
            raise ConfigInvalid("max_rounds >= 1 and max_qlen >= 2 required")


@dataclass
class EpochMetrics:
    epoch: int
    env_samples: int
    train_success: float
    val_success: float
    memory_size: int
    retention_passes: int
    reuse_ratio: float
    wall_ms: int

    def row(self) -> list:
        return [
            self.epoch,
            self.env_samples,
            f"{self.train_success:.6f}",
            f"{self.val_success:.6f}",
            self.memory_size,
            self.retention_passes,
            f"{self.reuse_ratio:.6f}",
            self.wall_ms,
        ]


def metrics_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_COLUMNS)
    for m in rows:
        w.writerow(m.row())
    return buf.getvalue()


# -- evaluation --------------------------------------------------------------


def evaluate(policy, records, seed: int = 0, max_rounds: int = 4, max_qlen: int = game.DEFAULT_MAX_QLEN) -> float:
    """Mean reward of one sampled game per grid; targets cycle over cells."""
    if not records:
        return 0.0
    grids = [r.grid for r in records]
    targets = [(k + seed) % game.N_CELLS for k in range(len(records))]
    rewards, _ = play_batch(policy, grids, targets, np.random.default_rng(seed), max_rounds, max_qlen)
    return float(rewards.mean())


# -- updates -----------------------------------------------------------------


@dataclass
class RetentionStats:
    considered: int = 0
    accepted: int = 0
    log_weights: list = field(default_factory=list)


def reinforce_update(policy: QuestionerPolicy, traj: Trajectory, b: float, opt: Optimizer) -> None:
    """One ascent step on ``(r - b) * sum_t log p(a_t)``."""
    tape = traj.tape if traj.tape is not None else score(policy, traj)[1]
    tape.backward(traj.reward - b)
    opt.step(policy.params)


def retention_step(policy: QuestionerPolicy, tape, weight: float, reward: float, b: float, opt: Optimizer) -> None:
    tape.backward(weight * (reward - b))
    opt.step(policy.params)


class Trainer:
    """Holds the mutable training state shared across epochs."""

    def __init__(self, policy: QuestionerPolicy, config: TrainConfig):
        config.validate()
        self.policy = policy
        self.config = config
        self.opt = Optimizer(config.optimizer, config.lr, clip=config.clip)
        self.b = 0.0
        self.env_samples = 0
        self.memory = MemoryBuffer()
        self.rng = np.random.default_rng([config.seed, 1])
        self.shuffle_rng = np.random.default_rng([config.seed, 2])
        self.order = None
        self.cursor = 0
        # instrumentation
        self.n_updates = 0
        self.n_retention_updates = 0
        self.n_region_violations = 0

    def _next_grid(self, records):
        if self.order is None or self.cursor >= len(self.order):
            self.order = self.rng.permutation(len(records))
            self.cursor = 0
        rec = records[self.order[self.cursor]]
        self.cursor += 1
        return rec.grid

    def run_episode(self, records) -> Trajectory:
        cfg = self.config
        grid = self._next_grid(records)
        target = int(self.rng.integers(game.N_CELLS))
        traj = rollout(self.policy, grid, target, self.rng, cfg.max_rounds, cfg.max_qlen)
        self.env_samples += 1
        reinforce_update(self.policy, traj, self.b, self.opt)
        self.n_updates += 1
        self.b = baseline_update(self.b, traj.reward, cfg.baseline_decay)
        traj.tape = None
        return traj

    def retention_pass(self, stats: RetentionStats | None = None) -> RetentionStats:
        cfg, t = self.config, self.config.toggles
        stats = stats if stats is not None else RetentionStats()
        entries = list(self.memory)
        if cfg.shuffle_memory:
            entries = [entries[i] for i in self.shuffle_rng.permutation(len(entries))]
        bound = math.log(cfg.omega_max)
        for entry in entries:
            p, tape = score(self.policy, entry)
            q = entry.stored_probs
            if t.pb:
                entry.stored_probs = p
            log_w = log_importance_weight(p, q)
            stats.considered += 1
            stats.log_weights.append(log_w)
            if not in_trust_region(log_w, cfg.omega_max, t.ub, t.lb):
                continue
            # counts every applied update outside the two-sided region, whatever the toggles
            if abs(log_w) > bound:
                self.n_region_violations += 1
            weight = math.exp(min(log_w, MAX_LOG_WEIGHT))
            retention_step(self.policy, tape, weight, entry.reward, self.b, self.opt)
            stats.accepted += 1
            self.n_retention_updates += 1
        return stats


def retention_pass(policy: QuestionerPolicy, memory: MemoryBuffer, config: TrainConfig, b: float, opt: Optimizer | None = None) -> RetentionStats:
    """Functional wrapper: one sweep over *memory* with a frozen baseline *b*."""
    tr = Trainer(policy, config)
    if opt is not None:
        tr.opt = opt
    tr.memory = memory
    tr.b = b
    return tr.retention_pass()


@dataclass
class TrainResult:
    metrics: list
    best_params: dict
    best_val: float
    initial_val: float
    trainer: Trainer
    validations: list = field(default_factory=list)


def pmr_train(config: TrainConfig, splits: dict, policy: QuestionerPolicy, on_epoch=None) -> TrainResult:
    """Train with REINFORCE, optionally followed by retention each epoch.

    With ``toggles.is_`` off this is plain REINFORCE. Returns per-epoch
    metrics and the parameters with the best validation success seen.
    """
    tr = Trainer(policy, config)
    t = config.toggles
    train, val = splits["train"], splits["val"]

    def validate():
        v = evaluate(policy, val, config.eval_seed, config.max_rounds, config.max_qlen)
        validations.append(v)
        return v

    validations = []
    initial = validate()
    best_val, best_params = initial, policy.params.get_values()
    metrics = []
    if not t.rf:
        return TrainResult(metrics, best_params, best_val, initial, tr, validations)

    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        tr.memory.clear(epoch)
        wins = 0
        for _ in range(config.episodes_per_epoch):
            traj = tr.run_episode(train)
            wins += traj.reward
            if t.is_ and (traj.reward > 0 or not t.pm):
                tr.memory.add(traj)
        memory_size = len(tr.memory)
        v = validate()
        if v > best_val:
            best_val, best_params = v, policy.params.get_values()
        passes = 0
        stats = RetentionStats()
        if t.is_ and memory_size:
            epoch_best, saved = v, policy.params.get_values()
            stale = 0
            while True:
                tr.retention_pass(stats)
                passes += 1
                if not t.es:
                    if passes >= config.fixed_passes:
                        v = validate()
                        break
                    continue
                v = validate()
                if v > epoch_best:
                    epoch_best, saved, stale = v, policy.params.get_values(), 0
                else:
                    stale += 1
                if stale >= config.n_max or passes >= config.max_passes:
                    break
            if t.es:
                policy.params.set_values(saved)
                v = epoch_best
            if v > best_val:
                best_val, best_params = v, policy.params.get_values()
        reuse = stats.accepted / stats.considered if stats.considered else 0.0
        wall = int(round((time.perf_counter() - t0) * 1000)) if config.wall_clock else 0
        m = EpochMetrics(epoch, tr.env_samples, wins / config.episodes_per_epoch, v, memory_size, passes, reuse, wall)
        metrics.append(m)
        log.info(
            "epoch %d samples=%d train=%.4f val=%.4f mem=%d passes=%d reuse=%.3f b=%.3f",
            epoch, tr.env_samples, m.train_success, v, memory_size, passes, reuse, tr.b,
        )
        tr.memory.clear()
        if on_epoch is not None:
            on_epoch(m, tr)
    return TrainResult(metrics, best_params, best_val, initial, tr, validations)


# -- supervised pretraining --------------------------------------------------


@dataclass
class PretrainEpoch:
    epoch: int
    train_perplexity: float
    val_perplexity: float
    val_success: float


def perplexity(policy: QuestionerPolicy, records) -> float:
    from .policy import teacher_force

    nll, n = 0.0, 0
    for rec in records:
        tokens, mask = game_stream(rec)
        tape = teacher_force(policy, rec.grid, tokens, mask)
        lp = tape.log_probs()
        nll -= float(np.sum(lp))
        n += lp.size
    return math.exp(nll / max(n, 1))


def pretrain(
    policy: QuestionerPolicy,
    splits: dict,
    epochs: int = 10,
    lr: float = 1e-3,
    optimizer: str = "adam",
    batch_size: int = 16,
    seed: int = 0,
    eval_seed: int = 12345,
    max_rounds: int = 4,
):
    """Maximum-likelihood training on scripted games.

    Returns ``(history, best_params)`` where the best parameters minimise
    validation perplexity (the initial parameters when ``epochs == 0``).
    """
    train, val = splits["train"], splits["val"]
    rng = np.random.default_rng([seed, 3])
    opt = Optimizer(optimizer, lr)
    store = policy.params
    history = []
    best_ppl, best_params = math.inf, store.get_values()
    for epoch in range(1, epochs + 1):
        order = rng.permutation(len(train))
        store.zero_grad()
        for k, idx in enumerate(order, start=1):
            mle_loss(policy, train[idx])
            if k % batch_size == 0 or k == len(order):
                n = batch_size if k % batch_size == 0 else k % batch_size
                for g in store.grads.values():
                    g /= n
                opt.step(store)
        row = PretrainEpoch(
            epoch,
            perplexity(policy, train),
            perplexity(policy, val),
            evaluate(policy, val, eval_seed, max_rounds),
        )
        history.append(row)
        log.info("pretrain epoch %d train_ppl=%.4f val_ppl=%.4f val_success=%.4f", *row.__dict__.values())
        if row.val_perplexity < best_ppl:
            best_ppl, best_params = row.val_perplexity, store.get_values()
    return history, best_params
