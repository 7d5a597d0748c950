"""Small dense numeric kernel: parameters, LSTM cell, softmax, optimizers.

Everything works on float64 numpy arrays. Backward functions return gradients
w.r.t. their inputs and accumulate parameter gradients into caller-owned
arrays, so a sequence model can sum contributions across time steps.
"""

from __future__ import annotations

import math
import os

import numpy as np

from .errors import DegenerateDistribution, MissingCheckpoint, ShapeMismatch

BETA1 = 0.9
BETA2 = 0.999
ADAM_EPS = 1e-8
INIT_SCALE = 0.08
CLIP_NORM = 5.0


class ParamStore:
    """Named parameter matrices with matching gradient buffers."""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}

    def add(self, name: str, value: np.ndarray) -> np.ndarray:
        value = np.array(value, dtype=np.float64)
        if value.ndim != 2:
            raise ShapeMismatch(f"{name}: parameters are 2-d matrices, got shape {value.shape}")
        self.params[name] = value
        self.grads[name] = np.zeros_like(value)
        return value

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]

    def __iter__(self):
        return iter(self.params)

    def names(self) -> list:
        return list(self.params)

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)

    def grad_norm(self) -> float:
        return math.sqrt(sum(float(np.dot(g.ravel(), g.ravel())) for g in self.grads.values()))

    def clip_grads(self, max_norm: float = CLIP_NORM) -> float:
        norm = self.grad_norm()
        if max_norm is not None and norm > max_norm:
            scale = max_norm / norm
            for g in self.grads.values():
                g *= scale
        return norm

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for name, value in self.params.items():
            out.add(name, value.copy())
        return out

    def get_values(self) -> dict:
        return {name: v.copy() for name, v in self.params.items()}

    def set_values(self, values: dict) -> None:
        for name, v in values.items():
            if self.params[name].shape != v.shape:
                raise ShapeMismatch(f"{name}: {v.shape} != {self.params[name].shape}")
            self.params[name][...] = v

    def flat(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self.params.values()])

    def size(self) -> int:
        return sum(v.size for v in self.params.values())


def init_uniform(store: ParamStore, rng: np.random.Generator, scale: float = INIT_SCALE) -> None:
    for v in store.params.values():
        v[...] = rng.uniform(-scale, scale, size=v.shape)


# -- layers ------------------------------------------------------------------


def linear(x: np.ndarray, W: np.ndarray, b: np.ndarray) -> np.ndarray:
    if W.shape[1] != x.shape[-1] or b.size != W.shape[0]:
        raise ShapeMismatch(f"linear: W {W.shape}, x {x.shape}, b {b.shape}")
    return W @ x + b.reshape(-1)


def linear_backward(dout, x, W, dW=None, db=None):
    """Return dL/dx; add dL/dW and dL/db into the given buffers."""
    if dW is not None:
        dW += np.outer(dout, x)
    if db is not None:
        db += dout.reshape(db.shape)
    return W.T @ dout


def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def lstm_step(x, h_prev, c_prev, W, b):
    """One LSTM step. ``W`` is (4H, X+H) with gate blocks ordered i, f, o, g."""
    H = h_prev.shape[-1]
    if W.shape != (4 * H, x.shape[-1] + H) or c_prev.shape != h_prev.shape:
        raise ShapeMismatch(f"lstm_step: W {W.shape}, x {x.shape}, h {h_prev.shape}, c {c_prev.shape}")
    xh = np.concatenate((x, h_prev))
    z = W @ xh + b.reshape(-1)
    ifo = sigmoid(z[: 3 * H])
    g = np.tanh(z[3 * H :])
    i, f, o = ifo[:H], ifo[H : 2 * H], ifo[2 * H :]
    c = f * c_prev + i * g
    tc = np.tanh(c)
    h = o * tc
    cache = (xh, ifo, g, c_prev, tc)
    return h, c, cache


def lstm_step_backward(dh, dc, cache, W, dW=None, db=None):
    """Backprop one step. Returns ``(dx, dh_prev, dc_prev, dz)``.

    ``dc`` is the gradient arriving at the cell state from the future.
    """
    xh, ifo, g, c_prev, tc = cache
    H = tc.shape[-1]
    i, f, o = ifo[:H], ifo[H : 2 * H], ifo[2 * H :]
    dc = dc + dh * o * (1.0 - tc * tc)
    dz = np.empty(4 * H)
    dz[:H] = dc * g
    dz[H : 2 * H] = dc * c_prev
    dz[2 * H : 3 * H] = dh * tc
    dz[: 3 * H] *= ifo * (1.0 - ifo)
    dz[3 * H :] = dc * i * (1.0 - g * g)
    if dW is not None:
        dW += np.outer(dz, xh)
    if db is not None:
        db += dz.reshape(db.shape)
    dxh = W.T @ dz
    X = xh.shape[0] - H
    return dxh[:X], dxh[X:], dc * f, dz


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - np.max(logits, axis=-1, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


def sample_categorical(probs, rng: np.random.Generator, tol: float = 1e-9) -> int:
    probs = np.asarray(probs, dtype=np.float64)
    total = probs.sum()
    if not abs(total - 1.0) <= tol or np.any(probs < 0):
        raise DegenerateDistribution(f"probabilities sum to {total!r}")
    u = rng.random()
    idx = int(np.searchsorted(np.cumsum(probs), u, side="right"))
    # u can land past the last cumulative value by rounding; walk back to a nonzero entry
    idx = min(idx, probs.size - 1)
    while probs[idx] == 0.0 and idx > 0:
        idx -= 1
    return idx


def sample_categorical_rows(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Inverse-CDF draw per row of a (B, K) probability matrix."""
    u = rng.random(probs.shape[0])
    cdf = np.cumsum(probs, axis=1)
    idx = (cdf <= u[:, None]).sum(axis=1)
    return np.minimum(idx, probs.shape[1] - 1)


# -- optimizers --------------------------------------------------------------


class Optimizer:
    """SGD or bias-corrected Adam over a ParamStore; zeroes grads after each step."""

    def __init__(self, kind: str = "sgd", lr: float = 0.01, clip: float | None = CLIP_NORM):
        if kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {kind!r}")
        self.kind = kind
        self.lr = lr
        self.clip = clip
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, store: ParamStore) -> None:
        if self.clip is not None:
            store.clip_grads(self.clip)
        if self.kind == "sgd":
            for name, p in store.params.items():
                p -= self.lr * store.grads[name]
        else:
            self.t += 1
            bc1 = 1.0 - BETA1**self.t
            bc2 = 1.0 - BETA2**self.t
            for name, p in store.params.items():
                g = store.grads[name]
                if name not in self.m:
                    self.m[name] = np.zeros_like(p)
                    self.v[name] = np.zeros_like(p)
                m, v = self.m[name], self.v[name]
                m *= BETA1
                m += (1.0 - BETA1) * g
                v *= BETA2
                v += (1.0 - BETA2) * g * g
                p -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)
        store.zero_grad()


def optimizer_step(store: ParamStore, kind: str, lr: float, state: Optimizer | None = None) -> Optimizer:
    """Apply one update in place and return the optimizer state used."""
    opt = state if state is not None else Optimizer(kind, lr)
    opt.step(store)
    return opt


# -- verification ------------------------------------------------------------


def finite_diff_check(loss_fn, store: ParamStore, eps: float = 1e-5, n_coords: int = 200, rng=None, names=None) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_fn(store)`` must return the scalar loss and leave the analytic
    gradient in ``store.grads`` (it is called once with zeroed grads).
    Coordinates are sampled uniformly without replacement from the parameters
    in *names* (default: all of them).
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    store.zero_grad()
    loss_fn(store)
    analytic = {name: g.copy() for name, g in store.grads.items()}
    names = store.names() if names is None else list(names)
    coords = [(name, j) for name in names for j in range(store[name].size)]
    pick = rng.choice(len(coords), size=min(n_coords, len(coords)), replace=False)
    worst = 0.0
    for k in sorted(pick):
        name, j = coords[k]
        flat = store[name].reshape(-1)
        orig = flat[j]
        flat[j] = orig + eps
        store.zero_grad()
        lp = loss_fn(store)
        flat[j] = orig - eps
        store.zero_grad()
        lm = loss_fn(store)
        flat[j] = orig
        num = (lp - lm) / (2.0 * eps)
        ana = analytic[name].reshape(-1)[j]
        err = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
        worst = max(worst, err)
    store.zero_grad()
    return worst


# -- checkpoints -------------------------------------------------------------

CKPT_HEADER = "pmrckpt 1"


def save_checkpoint(store: ParamStore, path) -> None:
    lines = [CKPT_HEADER]
    for name, v in store.params.items():
        rows, cols = v.shape
        lines.append(f"param {name} {rows} {cols}")
        for r in range(rows):
            lines.append(" ".join(repr(float(x)) for x in v[r]))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines))
        fh.write("\n")


def load_checkpoint(path) -> ParamStore:
    if not os.path.exists(path):
        raise MissingCheckpoint(f"checkpoint not found: {path}")
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().split("\n")
    if not lines or lines[0] != CKPT_HEADER:
        raise ValueError(f"{path}: not a checkpoint (bad header)")
    store = ParamStore()
    k = 1
    while k < len(lines) and lines[k]:
        tag, name, rows, cols = lines[k].split()
        if tag != "param":
            raise ValueError(f"{path}:{k + 1}: expected 'param', got {tag!r}")
        rows, cols = int(rows), int(cols)
        data = [[float(x) for x in lines[k + 1 + r].split()] for r in range(rows)]
        arr = np.array(data, dtype=np.float64).reshape(rows, cols)
        store.add(name, arr)
        k += 1 + rows
    return store
