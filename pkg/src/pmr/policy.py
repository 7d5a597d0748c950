"""Recurrent questioner policy and game rollouts.

The questioner conditions on the grid through its initial LSTM state and on
the dialog through its token stream: question tokens it emits itself, answer
tokens injected by the environment. A :class:`Tape` runs the network one
token at a time and keeps the activations needed for backprop; rollouts and
teacher-forced scoring drive the same tape code, so the probabilities a
rollout records are reproduced exactly by :func:`score`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import game
from .game import ANSWER_TOKENS, CONTEXT_DIM, QMARK, SOS, VOCAB_SIZE, GameRecord, GridImage, QAPair
from .nn import ParamStore, init_uniform, log_softmax, lstm_step, lstm_step_backward, sample_categorical, sample_categorical_rows, sigmoid

PARAM_NAMES = ("embed", "ctx_W", "ctx_b", "lstm_W", "lstm_b", "out_W", "out_b")


@dataclass
class Trajectory:
    grid: GridImage
    target_index: int
    tokens: tuple
    mask: tuple
    probs: np.ndarray  # per token; NaN where mask is False
    reward: int
    guess_index: int = -1
    tape: "Tape | None" = field(default=None, repr=False, compare=False)

    def action_probs(self) -> np.ndarray:
        return self.probs[np.asarray(self.mask, dtype=bool)]

    def dialog(self) -> list:
        return stream_to_dialog(self.tokens)


def stream_to_dialog(tokens) -> list:
    dialog, q = [], []
    for tok in tokens[1:]:
        if tok in ANSWER_TOKENS and q and q[-1] == QMARK:
            dialog.append(QAPair(tuple(q), int(tok)))
            q = []
        else:
            q.append(int(tok))
    return dialog


def game_stream(rec: GameRecord) -> tuple:
    """Token stream and action mask for a scripted game."""
    tokens, mask = [SOS], [False]
    for qa in rec.dialog:
        tokens.extend(qa.question)
        mask.extend([True] * len(qa.question))
        tokens.append(qa.answer)
        mask.append(False)
    return tuple(tokens), tuple(mask)


class QuestionerPolicy:
    def __init__(self, hidden: int = 64, embed: int = 16, seed: int | None = 0, params: ParamStore | None = None):
        if params is not None:
            self.params = params
            embed = params["embed"].shape[1]
            hidden = params["out_W"].shape[1]
        else:
            self.params = ParamStore()
            self.params.add("embed", np.zeros((VOCAB_SIZE, embed)))
            self.params.add("ctx_W", np.zeros((2 * hidden, CONTEXT_DIM)))
            self.params.add("ctx_b", np.zeros((1, 2 * hidden)))
            self.params.add("lstm_W", np.zeros((4 * hidden, embed + hidden)))
            self.params.add("lstm_b", np.zeros((1, 4 * hidden)))
            self.params.add("out_W", np.zeros((VOCAB_SIZE, hidden)))
            self.params.add("out_b", np.zeros((1, VOCAB_SIZE)))
            if seed is not None:
                init_uniform(self.params, np.random.default_rng(seed))
        self.hidden = hidden
        self.embed_dim = embed

    def clone(self) -> "QuestionerPolicy":
        return QuestionerPolicy(params=self.params.copy())

    def encode_context(self, grid: GridImage):
        P = self.params
        hc = P["ctx_W"] @ grid.one_hot() + P["ctx_b"][0]
        return hc[: self.hidden].copy(), hc[self.hidden :].copy()

    def step(self, state, token: int):
        """Feed one token; return the next-token distribution and new state."""
        P = self.params
        h, c = state
        h, c, _ = lstm_step(P["embed"][token], h, c, P["lstm_W"], P["lstm_b"][0])
        probs = np.exp(log_softmax(P["out_W"] @ h + P["out_b"][0]))
        return probs, (h, c)

    def tape(self, grid: GridImage) -> "Tape":
        return Tape(self, grid)

    def batch_tape(self, grids) -> "BatchTape":
        return BatchTape(self, grids)


policy_step = QuestionerPolicy.step


class Tape:
    """Single-game forward pass that records activations for backprop."""

    def __init__(self, policy: QuestionerPolicy, grid: GridImage):
        P = policy.params
        self.policy = policy
        self.x = grid.one_hot()
        H = policy.hidden
        hc = P["ctx_W"] @ self.x + P["ctx_b"][0]
        self.h, self.c = hc[:H].copy(), hc[H:].copy()
        self.inputs = []
        self.caches = []
        self.hs = []
        # emitted steps: (step index, probs, action)
        self.emits = []

    def advance(self, token: int, emit: bool):
        P = self.policy.params.params
        h, c, cache = lstm_step(P["embed"][token], self.h, self.c, P["lstm_W"], P["lstm_b"][0])
        self.inputs.append(token)
        self.caches.append(cache)
        self.hs.append(h)
        self.h, self.c = h, c
        if not emit:
            return None
        logp = log_softmax(P["out_W"] @ h + P["out_b"][0])
        probs = np.exp(logp)
        self.emits.append([len(self.inputs) - 1, probs, logp, -1])
        return probs

    def choose(self, action: int) -> float:
        """Record the action taken at the latest emitting step; return its probability."""
        last = self.emits[-1]
        last[3] = action
        return float(last[1][action])

    def log_probs(self) -> np.ndarray:
        return np.array([e[2][e[3]] for e in self.emits])

    def backward(self, coefs) -> None:
        """Accumulate gradients of ``-sum_k coefs[k] * log p(a_k)`` into the param store."""
        store = self.policy.params
        P, G = store.params, store.grads
        coefs = np.broadcast_to(np.asarray(coefs, dtype=np.float64), (len(self.emits),))
        n = len(self.inputs)
        H = self.policy.hidden
        E = self.policy.embed_dim
        dlogit_at = {}
        for (t, probs, _, a), k in zip(self.emits, coefs):
            d = probs * k
            d[a] -= k
            dlogit_at[t] = d
        W = P["lstm_W"]
        outW = P["out_W"]
        dzs = np.empty((n, 4 * H))
        dh = np.zeros(H)
        dc = np.zeros(H)
        dembed = G["embed"]
        for t in range(n - 1, -1, -1):
            d = dlogit_at.get(t)
            if d is not None:
                dh = dh + outW.T @ d
            dx, dh, dc, dz = lstm_step_backward(dh, dc, self.caches[t], W)
            dzs[t] = dz
            dembed[self.inputs[t]] += dx
        if dlogit_at:
            steps = sorted(dlogit_at)
            D = np.array([dlogit_at[t] for t in steps])
            Hs = np.array([self.hs[t] for t in steps])
            G["out_W"] += D.T @ Hs
            G["out_b"] += D.sum(axis=0)
        XH = np.array([cache[0] for cache in self.caches]) if n else np.zeros((0, E + H))
        G["lstm_W"] += dzs.T @ XH
        G["lstm_b"] += dzs.sum(axis=0)
        dhc = np.concatenate((dh, dc))
        G["ctx_W"] += np.outer(dhc, self.x)
        G["ctx_b"] += dhc


class BatchTape:
    """Forward-only batched stepping used for evaluation rollouts."""

    def __init__(self, policy: QuestionerPolicy, grids):
        P = policy.params
        self.P = P.params
        self.Hd = policy.hidden
        X = np.array([g.one_hot() for g in grids])
        HC = X @ P["ctx_W"].T + P["ctx_b"]
        self.H = HC[:, : self.Hd].copy()
        self.C = HC[:, self.Hd :].copy()

    def advance(self, rows: np.ndarray, tokens: np.ndarray, emit: np.ndarray) -> np.ndarray:
        P, Hd = self.P, self.Hd
        XH = np.concatenate((P["embed"][tokens], self.H[rows]), axis=1)
        Z = XH @ P["lstm_W"].T + P["lstm_b"]
        ifo = sigmoid(Z[:, : 3 * Hd])
        g = np.tanh(Z[:, 3 * Hd :])
        c = ifo[:, Hd : 2 * Hd] * self.C[rows] + ifo[:, :Hd] * g
        h = ifo[:, 2 * Hd :] * np.tanh(c)
        self.C[rows] = c
        self.H[rows] = h
        logits = h[emit] @ P["out_W"].T + P["out_b"]
        return np.exp(log_softmax(logits))


# -- rollouts ----------------------------------------------------------------


def rollout(policy, grid: GridImage, target_index: int, rng: np.random.Generator, max_rounds: int = 4, max_qlen: int = game.DEFAULT_MAX_QLEN) -> Trajectory:
    """Play one game: ``max_rounds`` questions, then the guesser decides."""
    tape = policy.tape(grid)
    tokens, mask, probs = [SOS], [False], [np.nan]
    for rnd in range(max_rounds):
        question = []
        while True:
            p = tape.advance(tokens[-1], emit=True)
            if len(question) == max_qlen - 1:
                a = QMARK
            else:
                a = sample_categorical(p, rng)
            probs.append(tape.choose(a))
            tokens.append(a)
            mask.append(True)
            question.append(a)
            if a == QMARK:
                break
        ans = game.answer(grid, target_index, question)
        if rnd < max_rounds - 1:
            tape.advance(QMARK, emit=False)
        tokens.append(ans)
        mask.append(False)
        probs.append(np.nan)
    dialog = stream_to_dialog(tokens)
    g = game.guess(grid, dialog, rng)
    return Trajectory(grid, target_index, tuple(tokens), tuple(mask), np.array(probs), game.reward(g, target_index), g, tape)


def teacher_force(policy: QuestionerPolicy, grid: GridImage, tokens, mask) -> Tape:
    """Run the tape over a stored stream, emitting at every masked position."""
    tape = policy.tape(grid)
    masked = [k for k, m in enumerate(mask) if m]
    if not masked:
        return tape
    last = masked[-1]
    for k in range(last):
        emit = bool(mask[k + 1])
        tape.advance(tokens[k], emit)
        if emit:
            tape.choose(tokens[k + 1])
    return tape


def score(policy: QuestionerPolicy, traj) -> tuple:
    """Per-action probabilities of a stored trajectory under the current parameters."""
    tape = teacher_force(policy, traj.grid, traj.tokens, traj.mask)
    probs = np.array([e[1][e[3]] for e in tape.emits])
    return probs, tape


def mle_loss(policy: QuestionerPolicy, rec: GameRecord) -> float:
    """Negative log-likelihood of the scripted question tokens.

    Gradients are accumulated into ``policy.params.grads``.
    """
    tokens, mask = game_stream(rec)
    tape = teacher_force(policy, rec.grid, tokens, mask)
    loss = -math.fsum(tape.log_probs())
    tape.backward(1.0)
    return loss


def play_batch(policy, grids, targets, rng: np.random.Generator, max_rounds: int = 4, max_qlen: int = game.DEFAULT_MAX_QLEN):
    """Play many games in lock step; returns ``(rewards, guesses)``."""
    B = len(grids)
    tape = policy.batch_tape(grids)
    nxt = np.full(B, SOS)
    pending = np.zeros(B, dtype=int)
    rounds = np.zeros(B, dtype=int)
    done = np.zeros(B, dtype=bool)
    questions = [[] for _ in range(B)]
    dialogs = [[] for _ in range(B)]
    while not done.all():
        rows = np.flatnonzero(~done)
        toks = nxt[rows]
        emit = toks != QMARK
        probs = tape.advance(rows, toks, emit)
        # rows that just fed '?' take the pending answer as next input
        fed_q = rows[~emit]
        nxt[fed_q] = pending[fed_q]
        erows = rows[emit]
        if erows.size == 0:
            continue
        acts = sample_categorical_rows(probs, rng)
        for r, a in zip(erows, acts):
            q = questions[r]
            if len(q) == max_qlen - 1:
                a = QMARK
            q.append(int(a))
            if a != QMARK:
                nxt[r] = a
                continue
            ans = game.answer(grids[r], targets[r], q)
            dialogs[r].append(QAPair(tuple(q), ans))
            questions[r] = []
            rounds[r] += 1
            if rounds[r] == max_rounds:
                done[r] = True
            else:
                nxt[r] = QMARK
                pending[r] = ans
    guesses = np.array([game.guess(grids[r], dialogs[r], rng) for r in range(B)])
    rewards = (guesses == np.asarray(targets)).astype(int)
    return rewards, guesses


# -- non-learned questioners (diagnostics and oracles) -----------------------


def _one_hot(tok: int) -> np.ndarray:
    p = np.zeros(VOCAB_SIZE)
    p[tok] = 1.0
    return p


class _ScriptTape:
    def __init__(self, grid, next_question):
        self.grid = grid
        self.next_question = next_question
        self.candidates = frozenset(range(game.N_CELLS))
        self.queue = []
        self.asked = []
        self.last = None

    def advance(self, token, emit):
        if token in ANSWER_TOKENS and self.asked:
            qa = QAPair(self.asked[-1], int(token))
            self.candidates = game.filter_candidates(self.candidates, self.grid, qa)
        if not emit:
            return None
        if not self.queue:
            q = self.next_question(self)
            if q is None:
                q = self.last
            self.last = q
            self.asked.append(q)
            self.queue = list(q)
        return _one_hot(self.queue.pop(0))

    def choose(self, action):
        return 1.0


class _ListBatchTape:
    def __init__(self, tapes):
        self.tapes = tapes

    def advance(self, rows, tokens, emit):
        out = []
        for r, t, e in zip(rows, tokens, emit):
            p = self.tapes[r].advance(int(t), bool(e))
            if e:
                out.append(p)
        return np.array(out).reshape(-1, VOCAB_SIZE)


class ScriptedPolicy:
    """Questioner that asks the scripted generator's questions, tracking candidates from answers."""

    def __init__(self, seed: int = 0):
        self.rng = np.random.default_rng(seed)

    def _next(self, tape):
        q = game.scripted_question(tape.candidates, tape.grid, self.rng)
        if q is None and tape.last is None:
            # no informative question at all; ask something harmless
            q = game.render_question("style", "flat")
        return q

    def tape(self, grid):
        return _ScriptTape(grid, self._next)

    def batch_tape(self, grids):
        return _ListBatchTape([self.tape(g) for g in grids])


class ReplayPolicy:
    """Replays the questions of recorded games verbatim, repeating the last one when exhausted."""

    def __init__(self, records):
        self.by_grid = {rec.grid.key(): rec for rec in records}

    def tape(self, grid):
        questions = [qa.question for qa in self.by_grid[grid.key()].dialog]

        def nxt(tape):
            k = len(tape.asked)
            return questions[k] if k < len(questions) else None

        return _ScriptTape(grid, nxt)

    def batch_tape(self, grids):
        return _ListBatchTape([self.tape(g) for g in grids])


class ConstantPolicy:
    """Always puts all mass on one token (default ``<pad>``)."""

    def __init__(self, token: int = game.PAD):
        self.token = token

    def tape(self, grid):
        return self

    def batch_tape(self, grids):
        return self

    def advance(self, token_or_rows, tokens_or_emit, emit=None):
        if emit is None:
            return _one_hot(self.token) if tokens_or_emit else None
        return np.tile(_one_hot(self.token), (int(np.sum(emit)), 1))

    def choose(self, action):
        return 1.0 if action == self.token else 0.0
