"""Multichannel time-series container and CSV/JSON-lines I/O."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Sequence, TextIO

import numpy as np

from .errors import InvalidInput, InvalidTimes


@dataclass
class ChannelData:
    """Observations of ``M`` named channels at strictly increasing times.

    ``values`` has shape ``(T, M)``; NaN marks an unobserved entry. Rows
    with no observed entry are dropped on construction.
    """

    times: np.ndarray
    values: np.ndarray
    channels: tuple[str, ...] | None = None

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float).ravel()
        Y = np.asarray(self.values, dtype=float)
        if Y.ndim == 1:
            Y = Y[:, None]
        if Y.shape[0] != t.size:
            raise InvalidInput(f"{t.size} times but {Y.shape[0]} rows")
        if np.any(np.diff(t) <= 0):
            raise InvalidTimes("times must be strictly increasing")
        keep = ~np.all(np.isnan(Y), axis=1)
        self.times = t[keep]
        self.values = Y[keep]
        if self.channels is None:
            self.channels = tuple(f"ch{j}" for j in range(Y.shape[1]))
        else:
            self.channels = tuple(str(c) for c in self.channels)
            if len(self.channels) != Y.shape[1]:
                raise InvalidInput("channel names do not match column count")

    @property
    def n_channels(self) -> int:
        return self.values.shape[1]

    def __len__(self) -> int:
        return self.times.size

    @property
    def n_scalar_obs(self) -> int:
        return int(np.sum(~np.isnan(self.values)))

    @property
    def duration(self) -> float:
        return float(self.times[-1] - self.times[0]) if len(self) > 1 else 0.0

    def median_dt(self) -> float:
        return float(np.median(np.diff(self.times))) if len(self) > 1 else 1.0

    def is_uniform(self, rtol: float = 1e-6) -> bool:
        if len(self) < 3:
            return True
        dt = np.diff(self.times)
        return bool(np.all(np.abs(dt - dt.mean()) <= rtol * dt.mean())) and not np.isnan(self.values).any()

    def patterns(self) -> tuple[np.ndarray, list[np.ndarray]]:
        """Per-row pattern index and the observed channel indices of each pattern."""
        mask = ~np.isnan(self.values)
        uniq, inv = np.unique(mask, axis=0, return_inverse=True)
        return inv.ravel().astype(np.int64), [np.flatnonzero(u) for u in uniq]

    def channel_stats(self) -> tuple[np.ndarray, np.ndarray]:
        mean = np.nanmean(self.values, axis=0)
        var = np.nanvar(self.values, axis=0)
        return mean, var

    def slice(self, start: int = 0, stop: int | None = None) -> "ChannelData":
        return ChannelData(self.times[start:stop], self.values[start:stop], self.channels)

    def resample_uniform(self, dt: float | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Linear interpolation of every channel onto a uniform grid."""
        dt = dt or self.median_dt()
        n = int(math.floor(self.duration / dt)) + 1
        grid = self.times[0] + dt * np.arange(n)
        out = np.empty((n, self.n_channels))
        for j in range(self.n_channels):
            ok = ~np.isnan(self.values[:, j])
            if ok.sum() < 2:
                out[:, j] = np.nanmean(self.values[:, j]) if ok.any() else 0.0
            else:
                out[:, j] = np.interp(grid, self.times[ok], self.values[ok, j])
        return grid, out


def write_csv(path_or_buf, data: ChannelData, float_fmt: str = "{:.17g}") -> None:
    """Header ``t,<ch1>,...``; missing entries are empty fields."""
    own = isinstance(path_or_buf, (str, Path))
    fh = open(path_or_buf, "w", encoding="utf-8", newline="") if own else path_or_buf
    try:
        fh.write(",".join(["t", *data.channels]) + "\n")
        for t, row in zip(data.times, data.values):
            cells = [float_fmt.format(t)] + ["" if math.isnan(v) else float_fmt.format(v) for v in row]
            fh.write(",".join(cells) + "\n")
    finally:
        if own:
            fh.close()


def read_csv(path_or_buf) -> ChannelData:
    own = isinstance(path_or_buf, (str, Path))
    fh = open(path_or_buf, "r", encoding="utf-8", newline="") if own else path_or_buf
    try:
        reader = csv.reader(fh)
        header = next(reader)
        if not header or header[0].strip() != "t":
            raise InvalidInput("CSV header must start with 't'")
        rows_t, rows_v = [], []
        for row in reader:
            if not row:
                continue
            rows_t.append(float(row[0]))
            vals = [float(c) if c.strip() else math.nan for c in row[1:]]
            vals += [math.nan] * (len(header) - 1 - len(vals))
            rows_v.append(vals)
    finally:
        if own:
            fh.close()
    return ChannelData(np.array(rows_t), np.array(rows_v, dtype=float).reshape(len(rows_t), len(header) - 1),
                       tuple(h.strip() for h in header[1:]))


def parse_stream_line(line: str) -> tuple[float, dict[str, float]]:
    """Parse ``t,<channel>=<value>[,...]``; raises ValueError when malformed."""
    parts = [p.strip() for p in line.strip().split(",")]
    if len(parts) < 2:
        raise ValueError("record needs a time and at least one channel value")
    t = float(parts[0])
    vals = {}
    for p in parts[1:]:
        name, sep, v = p.partition("=")
        if not sep or not name:
            raise ValueError(f"malformed field {p!r}")
        vals[name.strip()] = float(v)
    if not math.isfinite(t) or not all(math.isfinite(v) for v in vals.values()):
        raise ValueError("non-finite value")
    return t, vals


def format_stream_line(t: float, channels: Sequence[str], row: Sequence[float]) -> str:
    fields = [f"{t:.17g}"] + [f"{c}={v:.17g}" for c, v in zip(channels, row) if not math.isnan(v)]
    return ",".join(fields)
