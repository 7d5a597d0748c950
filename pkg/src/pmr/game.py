"""Symbolic GuessNumber game.

A grid holds nine cells with four categorical attributes each. The questioner
asks template questions ``is it <slot> <value> ?``, a rule-based answerer
replies about the hidden target cell, and a consistency-filter guesser picks a
cell that agrees with every answer.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import CorruptRecord, GameTooLong, MissingDataset

DIGITS = tuple(range(10))
COLORS = ("red", "blue", "green", "purple", "brown")
BGCOLORS = ("cyan", "yellow", "white", "silver", "salmon")
STYLES = ("flat", "stroke")

SLOTS = ("digit", "color", "bgcolor", "style")
DOMAINS = {"digit": DIGITS, "color": COLORS, "bgcolor": BGCOLORS, "style": STYLES}

DIGIT_WORDS = ("zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine")

VOCAB = (
    ("<pad>", "<sos>", "?", "<yes>", "<no>", "<invalid>", "is", "it")
    + SLOTS
    + DIGIT_WORDS
    + COLORS
    + BGCOLORS
    + STYLES
)
VOCAB_SIZE = len(VOCAB)
TOKEN_ID = {w: i for i, w in enumerate(VOCAB)}

PAD = TOKEN_ID["<pad>"]
SOS = TOKEN_ID["<sos>"]
QMARK = TOKEN_ID["?"]
YES = TOKEN_ID["<yes>"]
NO = TOKEN_ID["<no>"]
INVALID = TOKEN_ID["<invalid>"]
IS = TOKEN_ID["is"]
IT = TOKEN_ID["it"]
ANSWER_TOKENS = (YES, NO, INVALID)

N_CELLS = 9
# one indicator per (slot, value) pair, in slot order
ATTR_PAIRS = tuple((slot, v) for slot in SLOTS for v in DOMAINS[slot])
N_ATTR = len(ATTR_PAIRS)
CONTEXT_DIM = N_CELLS * N_ATTR
_ATTR_INDEX = {pair: i for i, pair in enumerate(ATTR_PAIRS)}

DEFAULT_MAX_QLEN = 6
SCRIPTED_MAX_ROUNDS = 8


def value_token(slot: str, value) -> int:
    if slot == "digit":
        return TOKEN_ID[DIGIT_WORDS[value]]
    return TOKEN_ID[value]


def _token_value(slot: str, tok: int):
    word = VOCAB[tok]
    if slot == "digit":
        return DIGIT_WORDS.index(word) if word in DIGIT_WORDS else None
    return word if word in DOMAINS[slot] else None


@dataclass(frozen=True)
class Cell:
    digit: int
    color: str
    bgcolor: str
    style: str

    def __post_init__(self):
        for slot in SLOTS:
            if getattr(self, slot) not in DOMAINS[slot]:
                raise ValueError(f"{slot}={getattr(self, slot)!r} outside its domain")

    def get(self, slot: str):
        return getattr(self, slot)

    def to_dict(self) -> dict:
        return {"digit": self.digit, "color": self.color, "bgcolor": self.bgcolor, "style": self.style}


@dataclass(frozen=True)
class GridImage:
    cells: tuple

    def __post_init__(self):
        if len(self.cells) != N_CELLS:
            raise ValueError(f"grid needs {N_CELLS} cells, got {len(self.cells)}")

    def key(self) -> tuple:
        return tuple((c.digit, c.color, c.bgcolor, c.style) for c in self.cells)

    def one_hot(self) -> np.ndarray:
        x = np.zeros(CONTEXT_DIM)
        for i, cell in enumerate(self.cells):
            for slot in SLOTS:
                x[i * N_ATTR + _ATTR_INDEX[(slot, cell.get(slot))]] = 1.0
        return x

    def is_solvable(self) -> bool:
        """True when no two cells share all four attributes."""
        return len(set(self.key())) == N_CELLS


@dataclass(frozen=True)
class QAPair:
    question: tuple
    answer: int


@dataclass(frozen=True)
class GameRecord:
    grid: GridImage
    target_index: int
    dialog: tuple
    guess_index: int
    reward: int


def generate_grid(rng: np.random.Generator) -> GridImage:
    cells = []
    for _ in range(N_CELLS):
        cells.append(
            Cell(
                digit=int(rng.integers(len(DIGITS))),
                color=COLORS[rng.integers(len(COLORS))],
                bgcolor=BGCOLORS[rng.integers(len(BGCOLORS))],
                style=STYLES[rng.integers(len(STYLES))],
            )
        )
    return GridImage(tuple(cells))


def render_question(slot: str, value) -> tuple:
    return (IS, IT, TOKEN_ID[slot], value_token(slot, value), QMARK)


def parse_question(tokens: Sequence[int]):
    """Return ``(slot, value)`` for a well-formed template question, else None."""
    if len(tokens) != 5:
        return None
    t0, t1, t2, t3, t4 = (int(t) for t in tokens)
    if t0 != IS or t1 != IT or t4 != QMARK:
        return None
    word = VOCAB[t2] if 0 <= t2 < VOCAB_SIZE else None
    if word not in DOMAINS:
        return None
    value = _token_value(word, t3) if 0 <= t3 < VOCAB_SIZE else None
    if value is None:
        return None
    return word, value


def answer(grid: GridImage, target_index: int, question: Sequence[int]) -> int:
    parsed = parse_question(question)
    if parsed is None:
        return INVALID
    slot, value = parsed
    return YES if grid.cells[target_index].get(slot) == value else NO


def filter_candidates(candidates: Iterable[int], grid: GridImage, qa: QAPair) -> frozenset:
    candidates = frozenset(candidates)
    parsed = parse_question(qa.question)
    if qa.answer == INVALID or parsed is None:
        return candidates
    slot, value = parsed
    if qa.answer == YES:
        kept = frozenset(i for i in candidates if grid.cells[i].get(slot) == value)
    elif qa.answer == NO:
        kept = frozenset(i for i in candidates if grid.cells[i].get(slot) != value)
    else:
        return candidates
    # contradictory answers would empty the set; keep the game total instead
    return kept if kept else candidates


def informative_pairs(candidates: Iterable[int], grid: GridImage) -> list:
    cand = sorted(candidates)
    out = []
    for slot, value in ATTR_PAIRS:
        hits = sum(1 for i in cand if grid.cells[i].get(slot) == value)
        if 0 < hits < len(cand):
            out.append((slot, value))
    return out


def scripted_question(candidates: Iterable[int], grid: GridImage, rng: np.random.Generator):
    """Pick a uniformly random informative question, or None to terminate."""
    candidates = frozenset(candidates)
    if len(candidates) <= 1:
        return None
    pairs = informative_pairs(candidates, grid)
    if not pairs:
        return None
    slot, value = pairs[rng.integers(len(pairs))]
    return render_question(slot, value)


def generate_game(
    grid: GridImage,
    target_index: int,
    rng: np.random.Generator,
    max_rounds: int = SCRIPTED_MAX_ROUNDS,
    retries: int = 10,
) -> GameRecord:
    for _ in range(retries):
        candidates = frozenset(range(N_CELLS))
        dialog = []
        while len(dialog) < max_rounds:
            q = scripted_question(candidates, grid, rng)
            if q is None:
                break
            qa = QAPair(q, answer(grid, target_index, q))
            dialog.append(qa)
            candidates = filter_candidates(candidates, grid, qa)
        if candidates == {target_index}:
            return GameRecord(grid, target_index, tuple(dialog), target_index, 1)
        if not informative_pairs(candidates, grid):
            break  # identical cells: no ordering can separate them
    raise GameTooLong(f"target {target_index} not isolated within {max_rounds} rounds")


def guess(grid: GridImage, dialog: Sequence[QAPair], rng: np.random.Generator) -> int:
    candidates = frozenset(range(N_CELLS))
    for qa in dialog:
        candidates = filter_candidates(candidates, grid, qa)
    survivors = sorted(candidates)
    if len(survivors) == 1:
        return survivors[0]
    return survivors[rng.integers(len(survivors))]


def reward(guess_index: int, target_index: int) -> int:
    return int(guess_index == target_index)


# -- dataset files -----------------------------------------------------------

SPLITS = ("train", "val", "test")


def record_to_json(rec: GameRecord) -> str:
    obj = {
        "grid": [c.to_dict() for c in rec.grid.cells],
        "target_index": rec.target_index,
        "dialog": [{"q": list(qa.question), "a": qa.answer} for qa in rec.dialog],
        "guess_index": rec.guess_index,
        "reward": rec.reward,
    }
    return json.dumps(obj, separators=(",", ":"))


def record_from_json(line: str) -> GameRecord:
    obj = json.loads(line)
    grid = GridImage(tuple(Cell(**c) for c in obj["grid"]))
    dialog = tuple(QAPair(tuple(int(t) for t in d["q"]), int(d["a"])) for d in obj["dialog"])
    rec = GameRecord(grid, int(obj["target_index"]), dialog, int(obj["guess_index"]), int(obj["reward"]))
    for idx in (rec.target_index, rec.guess_index):
        if not 0 <= idx < N_CELLS:
            raise ValueError(f"cell index {idx} out of range")
    return rec


def write_records(path, records: Iterable[GameRecord]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(record_to_json(rec))
            fh.write("\n")


def read_records(path) -> list:
    if not os.path.exists(path):
        raise MissingDataset(f"dataset file not found: {path}")
    out = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                out.append(record_from_json(line))
            except (ValueError, KeyError, TypeError) as exc:
                raise CorruptRecord(path, n, str(exc)) from exc
    return out


def generate_splits(n_train: int, n_val: int, n_test: int, seed: int) -> dict:
    """Build unique, solvable grids with one scripted game each, per split."""
    counts = {"train": n_train, "val": n_val, "test": n_test}
    for name, n in counts.items():
        if n <= 0:
            raise ValueError(f"{name} count must be positive, got {n}")
    rng = np.random.default_rng(seed)
    seen = set()
    splits = {}
    for name in SPLITS:
        records = []
        while len(records) < counts[name]:
            grid = generate_grid(rng)
            key = grid.key()
            if key in seen or not grid.is_solvable():
                continue
            seen.add(key)
            target = int(rng.integers(N_CELLS))
            records.append(generate_game(grid, target, rng))
        splits[name] = records
    return splits


def generate_dataset(n_train: int, n_val: int, n_test: int, seed: int, out_dir) -> dict:
    """Write ``train.jsonl``, ``val.jsonl`` and ``test.jsonl`` under *out_dir*."""
    splits = generate_splits(n_train, n_val, n_test, seed)
    os.makedirs(out_dir, exist_ok=True)
    paths = {}
    for name, records in splits.items():
        path = os.path.join(out_dir, f"{name}.jsonl")
        write_records(path, records)
        paths[name] = path
    return paths


def load_splits(data_dir) -> dict:
    return {name: read_records(os.path.join(data_dir, f"{name}.jsonl")) for name in SPLITS}
