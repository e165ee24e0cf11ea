"""Rank/linear correlation criteria and the repeated-split evaluation protocol."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import CorrelationError, ProtocolError

__all__ = [
    "ScoreTable",
    "SplitProtocol",
    "plcc",
    "srcc",
    "average_ranks",
    "run_split_protocol",
    "render_report_table",
]


@dataclass
class ScoreTable:
    """Paired (prediction, mos) columns; needs n >= 2 finite rows."""

    predictions: np.ndarray
    mos: np.ndarray

    def __post_init__(self):
        self.predictions = np.asarray(self.predictions, dtype=np.float64).reshape(-1)
        self.mos = np.asarray(self.mos, dtype=np.float64).reshape(-1)
        if self.predictions.size != self.mos.size:
            raise CorrelationError("columns must have equal length")
        if self.predictions.size < 2:
            raise CorrelationError("need at least 2 score pairs")
        if not (np.isfinite(self.predictions).all() and np.isfinite(self.mos).all()):
            raise CorrelationError("scores must be finite")

    @property
    def n(self) -> int:
        return self.predictions.size


def _pearson(x: np.ndarray, y: np.ndarray) -> float:
    xc = x - x.mean()
    yc = y - y.mean()
    vx = float(xc @ xc)
    vy = float(yc @ yc)
    if vx == 0.0 or vy == 0.0:
        raise CorrelationError("zero variance column: correlation undefined")
    return float((xc @ yc) / np.sqrt(vx * vy))


def plcc(table: ScoreTable) -> float:
    """Pearson linear correlation between predictions and mos, in [-1, 1]."""
    return _pearson(table.predictions, table.mos)


def average_ranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks; tied values all receive the mean of their rank range."""
    values = np.asarray(values, dtype=np.float64)
    order = np.argsort(values, kind="stable")
    ranks = np.empty(values.size, dtype=np.float64)
    sorted_vals = values[order]
    i = 0
    while i < values.size:
        j = i
        while j + 1 < values.size and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def srcc(table: ScoreTable) -> float:
    """Spearman rank correlation: Pearson over average-ranked columns."""
    return _pearson(average_ranks(table.predictions), average_ranks(table.mos))


@dataclass
class SplitProtocol:
    """Repeated random train/test partitions, deterministic per base_seed."""

    n_splits: int = 10
    train_frac: float = 0.8
    base_seed: int = 0

    def __post_init__(self):
        if self.n_splits < 1:
            raise ProtocolError("n_splits must be >= 1")
        if not 0.0 < self.train_frac < 1.0:
            raise ProtocolError("train_frac must be in (0, 1)")

    def split_indices(self, n: int, split: int) -> tuple[np.ndarray, np.ndarray]:
        rng = np.random.default_rng((self.base_seed, split))
        perm = rng.permutation(n)
        n_train = int(round(self.train_frac * n))
        return np.sort(perm[:n_train]), np.sort(perm[n_train:])


def run_split_protocol(records, protocol: SplitProtocol, train_fn, eval_fn) -> dict:
    """Train on each split's train fraction, score srcc/plcc on its test fraction.

    train_fn(train_records, split_seed) -> state; eval_fn(state, test_records)
    -> ScoreTable. Reports per-split coefficients plus their means.
    """
    records = list(records)
    rows = []
    for split in range(protocol.n_splits):
        train_idx, test_idx = protocol.split_indices(len(records), split)
        if test_idx.size < 2:
            raise ProtocolError(f"split {split} leaves {test_idx.size} test records")
        train = [records[i] for i in train_idx]
        test = [records[i] for i in test_idx]
        state = train_fn(train, (protocol.base_seed, split))
        table = eval_fn(state, test)
        rows.append(
            {
                "split": split,
                "n_train": len(train),
                "n_test": len(test),
                "srcc": srcc(table),
                "plcc": plcc(table),
            }
        )
    return {
        "n_splits": protocol.n_splits,
        "splits": rows,
        "mean_srcc": float(np.mean([r["srcc"] for r in rows])),
        "mean_plcc": float(np.mean([r["plcc"] for r in rows])),
    }


def render_report_table(rows, label: str = "Setting") -> str:
    """Markdown table with one SRCC/PLCC pair per row.

    rows: iterable of (name, srcc, plcc).
    """
    lines = [f"| {label} | SRCC | PLCC |", "| --- | --- | --- |"]
    for name, s, p in rows:
        lines.append(f"| {name} | {s:.3f} | {p:.3f} |")
    return "\n".join(lines) + "\n"
