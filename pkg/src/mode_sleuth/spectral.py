"""Hann-windowed periodograms, Welch averaging and log-log slopes.

Convention: one-sided power spectral density per Hz. With window ``w`` the
periodogram of ``x`` (mean removed) is ``2 dt |X_k|^2 / sum(w^2)`` for
interior bins and half that at DC and Nyquist, so that white noise of
variance ``v`` sits at ``2 v dt`` and ``sum(power) * df`` equals the
window-weighted variance exactly.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import InsufficientBand, InvalidInput, NonUniform

MIN_SAMPLES = 64


def hann_window(samples: int) -> np.ndarray:
    """``w_i = sin^2(pi i / (samples - 1))``."""
    if samples < 2:
        raise InvalidInput("Hann window needs at least 2 samples")
    i = np.arange(samples)
    return np.sin(np.pi * i / (samples - 1)) ** 2


def _window(name: str, n: int) -> np.ndarray:
    if name == "hann":
        return hann_window(n)
    if name in ("boxcar", "none", "rect"):
        return np.ones(n)
    raise InvalidInput(f"unknown window {name!r}")


@dataclass(frozen=True)
class Periodogram:
    freqs: np.ndarray  # Hz, ascending from 0 to Nyquist
    power: np.ndarray  # one-sided PSD per Hz
    window: str
    duration: float
    segments: int = 1

    @property
    def df(self) -> float:
        return float(self.freqs[1] - self.freqs[0]) if len(self.freqs) > 1 else 0.0

    def total_power(self) -> float:
        return float(np.sum(self.power) * self.df)


def check_uniform(times: np.ndarray, rtol: float = 1e-6) -> float:
    """Returns the common spacing; raises NonUniform otherwise."""
    times = np.asarray(times, dtype=float)
    dts = np.diff(times)
    if dts.size == 0:
        raise InvalidInput("need at least two samples")
    dt = float(dts.mean())
    if np.any(np.abs(dts - dt) > rtol * dt):
        raise NonUniform("sample times are not uniformly spaced")
    return dt


def _segment_power(x: np.ndarray, dt: float, w: np.ndarray) -> np.ndarray:
    n = len(x)
    X = np.fft.rfft(w * (x - x.mean()))
    p = 2.0 * dt * np.abs(X) ** 2 / np.sum(w * w)
    p[0] *= 0.5
    if n % 2 == 0:
        p[-1] *= 0.5
    return p


def periodogram(series, dt: float | None = None, times=None, window: str = "hann") -> Periodogram:
    """Single-window periodogram of a uniformly sampled series."""
    x = np.asarray(series, dtype=float).ravel()
    if times is not None:
        dt = check_uniform(times)
    if dt is None or not dt > 0:
        raise InvalidInput("a positive dt (or uniform times) is required")
    if x.size < MIN_SAMPLES:
        raise InvalidInput(f"periodogram needs at least {MIN_SAMPLES} samples")
    if np.isnan(x).any():
        raise NonUniform("missing samples; use the Kalman path for gappy data")
    p = _segment_power(x, dt, _window(window, x.size))
    return Periodogram(np.fft.rfftfreq(x.size, dt), p, window, x.size * dt)


def _segments(n: int, segments: int, overlap: float) -> tuple[int, int]:
    # segment length such that `segments` windows with the given overlap cover n
    L = int(n / (1 + (segments - 1) * (1 - overlap)))
    step = max(1, int(round(L * (1 - overlap))))
    return L, step


def welch(series, dt: float, segments: int = 8, overlap: float = 0.5, window: str = "hann") -> Periodogram:
    """Average of Hann periodograms over overlapping segments."""
    x = np.asarray(series, dtype=float).ravel()
    if x.size < MIN_SAMPLES:
        raise InvalidInput(f"Welch estimate needs at least {MIN_SAMPLES} samples")
    L, step = _segments(x.size, segments, overlap)
    L = max(L, min(x.size, MIN_SAMPLES // 2))
    w = _window(window, L)
    acc = None
    count = 0
    for start in range(0, x.size - L + 1, step):
        p = _segment_power(x[start:start + L], dt, w)
        acc = p if acc is None else acc + p
        count += 1
    return Periodogram(np.fft.rfftfreq(L, dt), acc / count, window, x.size * dt, count)


def cross_spectral_matrix(Y, dt: float, segments: int = 8, overlap: float = 0.5) -> tuple[np.ndarray, np.ndarray]:
    """Welch cross-spectral matrices ``C[f] = E[X(f) X(f)^H]`` (shape F x M x M).

    Diagonals coincide with :func:`welch` of each channel.
    """
    Y = np.asarray(Y, dtype=float)
    if Y.ndim == 1:
        Y = Y[:, None]
    n, M = Y.shape
    L, step = _segments(n, segments, overlap)
    w = hann_window(L)
    scale = 2.0 * dt / np.sum(w * w)
    acc = np.zeros((L // 2 + 1, M, M), dtype=complex)
    count = 0
    for start in range(0, n - L + 1, step):
        seg = Y[start:start + L]
        X = np.fft.rfft(w[:, None] * (seg - seg.mean(axis=0)), axis=0)
        acc += X[:, :, None] * X.conj()[:, None, :]
        count += 1
    C = scale * acc / count
    C[0] *= 0.5
    if L % 2 == 0:
        C[-1] *= 0.5
    return np.fft.rfftfreq(L, dt), C


@dataclass(frozen=True)
class SlopeFit:
    slope: float
    stderr: float
    intercept: float
    n_bins: int
    band: tuple[float, float]


def loglog_slope(pg: Periodogram, band: Sequence[float]) -> SlopeFit:
    """Least-squares slope of log power against log frequency within ``band`` (Hz)."""
    lo, hi = float(band[0]), float(band[1])
    sel = (pg.freqs >= lo) & (pg.freqs <= hi) & (pg.freqs > 0) & (pg.power > 0)
    n = int(sel.sum())
    if n < 8:
        raise InsufficientBand(f"only {n} bins in band [{lo}, {hi}] Hz; need 8")
    x = np.log(pg.freqs[sel])
    y = np.log(pg.power[sel])
    X = np.column_stack([x, np.ones(n)])
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    resid = y - X @ coef
    s2 = float(resid @ resid) / max(n - 2, 1)
    cov = s2 * np.linalg.inv(X.T @ X)
    return SlopeFit(float(coef[0]), float(math.sqrt(cov[0, 0])), float(coef[1]), n, (lo, hi))


def second_order_psd(m: float, beta: float, k: float, forcing: Callable[[np.ndarray], np.ndarray] | float = 1.0):
    """``|x(Omega)|^2 = P(Omega) / ((k - m Omega^2)^2 + beta^2 Omega^2)`` as a function of Omega."""
    for name, v in (("m", m), ("beta", beta), ("k", k)):
        if not v > 0:
            raise InvalidInput(f"{name} must be positive")
    P = forcing if callable(forcing) else (lambda W, c=float(forcing): c * np.ones_like(W))

    def psd(Omega):
        W = np.asarray(Omega, dtype=float)
        return P(W) / ((k - m * W**2) ** 2 + beta**2 * W**2)

    return psd


def ou_psd(mu: float, sigma: float):
    """One-sided PSD per Hz of an OU process: ``2 sigma^2 / (mu^2 + (2 pi f)^2)``."""

    def psd(f_hz):
        W = 2 * np.pi * np.asarray(f_hz, dtype=float)
        return 2 * sigma**2 / (mu**2 + W**2)

    return psd


def fou_psd(M: float, gamma: float, J: float, sigma: float):
    """One-sided PSD per Hz of the filtered OU frequency ``M f' = p - gamma f``, ``p' = -J p + noise``."""

    def psd(f_hz):
        W2 = (2 * np.pi * np.asarray(f_hz, dtype=float)) ** 2
        return 2 * sigma**2 / ((J**2 + W2) * (gamma**2 + M**2 * W2))

    return psd


def write_periodogram_csv(path_or_buf, pg: Periodogram) -> None:
    own = isinstance(path_or_buf, (str, Path))
    fh = open(path_or_buf, "w", encoding="utf-8", newline="") if own else path_or_buf
    try:
        fh.write("freq_hz,power\n")
        for f, p in zip(pg.freqs, pg.power):
            fh.write(f"{f:.17g},{p:.17g}\n")
    finally:
        if own:
            fh.close()


def read_series_csv(path_or_buf, column: str | int | None = None) -> tuple[np.ndarray, np.ndarray, str]:
    """Read ``t,value`` (or a named column of a multichannel CSV)."""
    own = isinstance(path_or_buf, (str, Path))
    fh = open(path_or_buf, "r", encoding="utf-8", newline="") if own else path_or_buf
    try:
        rows = list(csv.reader(fh))
    finally:
        if own:
            fh.close()
    header = rows[0]
    if column is None:
        j = 1
    elif isinstance(column, int):
        j = column + 1
    else:
        if column not in header:
            raise InvalidInput(f"column {column!r} not in CSV header")
        j = header.index(column)
    t = np.array([float(r[0]) for r in rows[1:] if r])
    v = np.array([float(r[j]) if r[j].strip() else math.nan for r in rows[1:] if r])
    return t, v, header[j]
