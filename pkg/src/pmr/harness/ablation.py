"""Component ablation and importance-weight bound sweep."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, replace

from ..errors import PMRError
from ..policy import QuestionerPolicy
from ..trainers import Toggles, TrainConfig, evaluate, pmr_train

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class AblationRow:
    row_id: int
    toggles: Toggles
    omega_max: float


def _t(*flags) -> Toggles:
    return Toggles(*(bool(f) for f in flags))


OMEGA_SWEEP = (1.0, 5.0, 10.0, 20.0, 30.0, 100.0)

#               RF IS PM UB LB PB ES
ABLATION_ROWS = (
    AblationRow(1, _t(0, 0, 0, 0, 0, 0, 0), 10.0),
    AblationRow(2, _t(1, 0, 0, 0, 0, 0, 0), 10.0),
    AblationRow(3, _t(1, 1, 0, 0, 0, 0, 0), 10.0),
    AblationRow(4, _t(1, 1, 1, 0, 0, 0, 0), 10.0),
    AblationRow(5, _t(1, 1, 0, 1, 0, 0, 0), 10.0),
    AblationRow(6, _t(1, 1, 0, 1, 1, 0, 0), 10.0),
    AblationRow(7, _t(1, 1, 1, 1, 1, 0, 0), 10.0),
    AblationRow(8, _t(1, 1, 1, 1, 1, 1, 0), 10.0),
    AblationRow(9, _t(1, 1, 1, 1, 1, 1, 1), 10.0),
) + tuple(AblationRow(10 + k, _t(1, 1, 1, 1, 1, 1, 1), w) for k, w in enumerate(OMEGA_SWEEP))


def rows_by_id(ids) -> list:
    index = {r.row_id: r for r in ABLATION_ROWS}
    return [index[i] for i in ids]


@dataclass
class AblationResult:
    row: AblationRow
    test_success: float | None
    best_val: float | None = None
    metrics: list | None = None
    error: str = ""

    @property
    def failed(self) -> bool:
        return self.test_success is None


def row_config(base: TrainConfig, row: AblationRow) -> TrainConfig:
    return replace(base, toggles=row.toggles, omega_max=row.omega_max)


def run_row(base: TrainConfig, row: AblationRow, splits: dict, init_params) -> AblationResult:
    """Train from *init_params* and report test success of the best-validation parameters."""
    cfg = row_config(base, row)
    policy = QuestionerPolicy(params=init_params.copy())
    res = pmr_train(cfg, splits, policy)
    policy.params.set_values(res.best_params)
    test = evaluate(policy, splits["test"], cfg.eval_seed, cfg.max_rounds, cfg.max_qlen)
    return AblationResult(row, test, res.best_val, res.metrics)


def run_ablation(base: TrainConfig, splits: dict, init_params, rows=ABLATION_ROWS, on_row=None) -> list:
    """Run every row; a failing row is recorded and the rest continue.

    Rows whose training configuration coincides (row 9 and the ω_max=10 row)
    are run once, since training is deterministic.
    """
    results, done = [], {}
    for row in rows:
        key = (row.toggles.as_tuple(), row.omega_max)
        if key in done:
            prev = done[key]
            result = replace(prev, row=row)
        else:
            try:
                result = run_row(base, row, splits, init_params)
            except (PMRError, ArithmeticError, ValueError) as exc:
                log.error("ablation row %d failed: %s", row.row_id, exc)
                result = AblationResult(row, None, error=f"{type(exc).__name__}: {exc}")
            done[key] = result
        results.append(result)
        if on_row is not None:
            on_row(result)
    return results


def _fmt_omega(w: float) -> str:
    return f"{w:g}"


def format_table(results) -> str:
    header = ("#", "RF", "IS", "PM", "UB", "LB", "PB", "ES", "omega_max", "test_success")
    body = []
    for r in results:
        marks = ["x" if v else "-" for v in r.row.toggles.as_tuple()]
        score = "FAILED" if r.failed else f"{100 * r.test_success:.2f}"
        body.append((str(r.row.row_id), *marks, _fmt_omega(r.row.omega_max), score))
    widths = [max(len(row[i]) for row in (header, *body)) for i in range(len(header))]
    lines = ["  ".join(cell.rjust(w) for cell, w in zip(row, widths)) for row in (header, *body)]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def ablation_csv(results) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("row_id", "toggles", "omega_max", "test_success"))
    for r in results:
        score = "failed" if r.failed else f"{r.test_success:.6f}"
        w.writerow((r.row.row_id, r.row.toggles.label(), _fmt_omega(r.row.omega_max), score))
    return buf.getvalue()
