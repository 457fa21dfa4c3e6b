"""Position error statistics.

Records are held column-wise in :class:`ErrorTable`; every function also
accepts a plain list of :class:`ErrorRecord`.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import IO, Iterable, Sequence

import numpy as np

KEYS = ("run", "slot", "iteration", "agent")
RECORD_COLUMNS = ("run", "slot", "iteration", "agent", "error")


class EmptyGroupError(ValueError):
    """A statistic was requested over no records."""


@dataclass(frozen=True)
class ErrorRecord:
    run: int
    slot: int
    iteration: int
    agent: int
    error: float

    def __post_init__(self):
        if not self.error >= 0:
            raise ValueError(f"error must be non-negative, got {self.error}")


@dataclass
class ErrorTable:
    run: np.ndarray
    slot: np.ndarray
    iteration: np.ndarray
    agent: np.ndarray
    error: np.ndarray

    def __post_init__(self):
        n = np.asarray(self.error).size
        for k in RECORD_COLUMNS:
            arr = np.asarray(getattr(self, k)).reshape(-1)
            if arr.size != n:
                raise ValueError(f"column {k} has {arr.size} entries, expected {n}")
            setattr(self, k, arr)
        self.error = self.error.astype(float)
        if np.any(~(self.error >= 0)):
            raise ValueError("errors must be non-negative")

    def __len__(self) -> int:
        return self.error.size

    @classmethod
    def empty(cls) -> "ErrorTable":
        z = np.zeros(0, dtype=np.int64)
        return cls(z, z, z, z, np.zeros(0))

    @classmethod
    def from_records(cls, recs: Iterable[ErrorRecord]) -> "ErrorTable":
        recs = list(recs)
        if not recs:
            return cls.empty()
        return cls(*(np.array([getattr(r, k) for r in recs]) for k in RECORD_COLUMNS))

    @classmethod
    def from_trace(cls, run: int, slot: int, agent_ids, trace_means: np.ndarray, truth: np.ndarray) -> "ErrorTable":
        """Rows for every (iteration, agent) of an (L, N, 2) estimate trace."""
        L, n, _ = trace_means.shape
        err = np.hypot(*(trace_means - truth[None]).transpose(2, 0, 1))
        it = np.repeat(np.arange(1, L + 1), n)
        return cls(np.full(L * n, run), np.full(L * n, slot), it, np.tile(np.asarray(agent_ids), L), err.reshape(-1))

    @classmethod
    def concat(cls, tables: Sequence["ErrorTable"]) -> "ErrorTable":
        tables = [t for t in tables if len(t)]
        if not tables:
            return cls.empty()
        return cls(*(np.concatenate([getattr(t, k) for t in tables]) for k in RECORD_COLUMNS))

    def select(self, mask: np.ndarray) -> "ErrorTable":
        return ErrorTable(*(getattr(self, k)[mask] for k in RECORD_COLUMNS))

    def final_iteration(self) -> "ErrorTable":
        """Rows at the last iteration of each (run, slot)."""
        if not len(self):
            return self
        keys = self.run.astype(np.int64) * (2**32) + self.slot.astype(np.int64)
        last = {}
        for k, it in zip(keys, self.iteration):
            last[k] = max(last.get(k, it), it)
        mask = np.array([it == last[k] for k, it in zip(keys, self.iteration)])
        return self.select(mask)

    def write_csv(self, fh: IO[str]) -> None:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RECORD_COLUMNS)
        for row in zip(self.run, self.slot, self.iteration, self.agent, self.error):
            w.writerow([int(row[0]), int(row[1]), int(row[2]), int(row[3]), repr(float(row[4]))])


def _table(records) -> ErrorTable:
    if isinstance(records, ErrorTable):
        return records
    return ErrorTable.from_records(records)


def _groups(t: ErrorTable, by: Sequence[str]):
    for k in by:
        if k not in KEYS:
            raise KeyError(f"unknown group key {k!r}")
    if not by:
        yield (), np.ones(len(t), bool)
        return
    cols = np.column_stack([getattr(t, k) for k in by])
    uniq, inv = np.unique(cols, axis=0, return_inverse=True)
    inv = inv.reshape(-1)
    for g, key in enumerate(uniq):
        yield tuple(int(v) for v in key), inv == g


def rmse(records, by: Sequence[str] | None = None):
    """Root mean square error, overall or per group.

    With ``by`` the result maps each group key tuple to its RMSE.
    """
    t = _table(records)
    if not len(t):
        raise EmptyGroupError("rmse of an empty group")
    if not by:
        return float(np.sqrt(np.mean(t.error**2)))
    return {key: float(np.sqrt(np.mean(t.error[m] ** 2))) for key, m in _groups(t, by)}


def mean_abs_error(records) -> float:
    t = _table(records)
    if not len(t):
        raise EmptyGroupError("mean of an empty group")
    return float(np.mean(t.error))


def prob_within(records, threshold: float) -> float:
    """Fraction of agents with error <= ``threshold``, per slot, averaged over slots."""
    t = _table(records)
    if not len(t):
        raise EmptyGroupError("probability over an empty set")
    fr = [np.mean(t.error[m] <= threshold) for _, m in _groups(t, ("run", "slot"))]
    return float(np.mean(fr))


def convergence_trace(records) -> np.ndarray:
    """RMSE per iteration index, ordered by iteration."""
    t = _table(records)
    if not len(t):
        return np.zeros(0)
    per = rmse(t, ("iteration",))
    return np.array([per[k] for k in sorted(per)])


def plateau_iteration(trace: np.ndarray, band: float = 0.05) -> int:
    """First iteration (1-based) after which the trace stays within ``band`` of its final value."""
    trace = np.asarray(trace, float)
    final = trace[-1]
    ok = np.abs(trace - final) <= band * final
    k = len(trace)
    while k > 0 and ok[k - 1]:
        k -= 1
    return k + 1


def non_increasing_within(trace: np.ndarray, start: int, band: float = 0.05) -> bool:
    """True when no value from iteration ``start`` on exceeds the running minimum by more than ``band``."""
    tail = np.asarray(trace, float)[start - 1 :]
    if tail.size == 0:
        return True
    run_min = np.minimum.accumulate(tail)
    return bool(np.all(tail <= run_min * (1 + band)))


def summarize(records, threshold: float = 2.0) -> dict:
    t = _table(records)
    final = t.final_iteration()
    return {
        "rmse": rmse(final),
        "mean_abs_error": mean_abs_error(final),
        "median_error": float(np.median(final.error)),
        f"prob_within_{threshold:g}m": prob_within(final, threshold),
        "n_records": int(len(final)),
        "convergence": convergence_trace(t).tolist(),
    }


def write_summary(summary: dict, path: str | Path) -> None:
    Path(path).write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
