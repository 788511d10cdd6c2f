"""Observation containers and the ``state,time,value`` CSV format."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError

__all__ = ["Dataset", "read_dataset", "write_dataset", "format_float"]


def format_float(x: float) -> str:
    # 17 significant digits round-trip any double exactly
    return format(float(x), ".17g")


@dataclass(frozen=True)
class Dataset:
    """Noisy observations of a subset of the states (0-based indices)."""

    states: tuple[int, ...]
    times: tuple[np.ndarray, ...] = field(repr=False)
    values: tuple[np.ndarray, ...] = field(repr=False)

    def __post_init__(self):
        if not (len(self.states) == len(self.times) == len(self.values)):
            raise DataError("states, times and values must have the same length")
        if len(set(self.states)) != len(self.states):
            raise DataError("duplicate state in dataset")
        times = tuple(np.asarray(t, dtype=float).reshape(-1) for t in self.times)
        values = tuple(np.asarray(v, dtype=float).reshape(-1) for v in self.values)
        for j, t, v in zip(self.states, times, values):
            if t.shape != v.shape:
                raise DataError(f"state {j}: {t.size} times but {v.size} values")
            if not (np.all(np.isfinite(t)) and np.all(np.isfinite(v))):
                raise DataError(f"state {j}: non-finite time or value")
        object.__setattr__(self, "states", tuple(int(j) for j in self.states))
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "values", values)

    @classmethod
    def from_dict(cls, obs: dict) -> "Dataset":
        keys = sorted(obs)
        return cls(tuple(keys), tuple(obs[k][0] for k in keys), tuple(obs[k][1] for k in keys))

    def get(self, state: int):
        i = self.states.index(state)
        return self.times[i], self.values[i]

    @property
    def n_total(self) -> int:
        return int(sum(t.size for t in self.times))

    def check_against(self, d: int, T: float | None = None, observed=None):
        for j, t in zip(self.states, self.times):
            if j < 0 or j >= d:
                raise DataError(f"state index {j + 1} outside model dimension {d}")
            if observed is not None and j not in observed:
                raise DataError(f"state {j + 1} is not observed by the model")
            if T is not None and t.size and (t.min() < 0 or t.max() > T):
                raise DataError(f"state {j + 1}: observation times outside [0, {T}]")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["state", "time", "value"])
        for j, t, v in zip(self.states, self.times, self.values):
            for ti, vi in zip(t, v):
                w.writerow([j + 1, format_float(ti), format_float(vi)])
        return buf.getvalue()

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return self.states == other.states and all(
            np.array_equal(a, b) for a, b in zip(self.times + self.values, other.times + other.values)
        )

    __hash__ = None


def write_dataset(data: Dataset, path) -> None:
    Path(path).write_text(data.to_csv(), encoding="utf-8", newline="")


def read_dataset(path) -> Dataset:
    """Parse a ``state,time,value`` file (state indices 1-based on disk)."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read dataset {path}: {exc}") from exc
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or [c.strip() for c in rows[0]] != ["state", "time", "value"]:
        raise DataError(f"{path}: header must be 'state,time,value'")
    obs: dict[int, tuple[list, list]] = {}
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != 3:
            raise DataError(f"{path}:{lineno}: expected 3 fields, got {len(row)}")
        try:
            j, t, v = int(row[0]), float(row[1]), float(row[2])
        except ValueError as exc:
            raise DataError(f"{path}:{lineno}: {exc}") from None
        if j < 1:
            raise DataError(f"{path}:{lineno}: state index must be >= 1")
        if not (np.isfinite(t) and np.isfinite(v)):
            raise DataError(f"{path}:{lineno}: non-finite time or value")
        ts, vs = obs.setdefault(j - 1, ([], []))
        ts.append(t)
        vs.append(v)
    if not obs:
        raise DataError(f"{path}: no observations")
    return Dataset.from_dict({j: (np.array(ts), np.array(vs)) for j, (ts, vs) in obs.items()})
