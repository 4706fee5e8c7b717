"""Exact sampling of linear stochastic processes at arbitrary times.

Randomness comes from ``numpy.random.default_rng(seed)`` (PCG64), so a
given seed reproduces a path bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import matfun
from .errors import InvalidScheme, InvalidTimes
from .kalman import ObservationRecord, ObservationScheme
from .model import LtiSystem, mean_response, stationary_covariance


@dataclass(frozen=True)
class SamplePath:
    times: np.ndarray
    states: np.ndarray  # (len(times), n)
    seed: int | None = None

    def __post_init__(self):
        if len(self.times) != len(self.states):
            raise InvalidTimes("times and states differ in length")


def _check_times(times) -> np.ndarray:
    times = np.asarray(times, dtype=float).ravel()
    if times.size and not np.all(np.isfinite(times)):
        raise InvalidTimes("non-finite time")
    if np.any(np.diff(times) <= 0):
        raise InvalidTimes("times must be strictly increasing")
    return times


def sample_path(sys: LtiSystem, times: Sequence[float], init="stationary", seed: int | None = 0) -> SamplePath:
    """Draw ``x(t_i)`` exactly via the Duhamel step
    ``x_i = Phi x_{i-1} + (I - Phi) mean + w_i``, ``w_i ~ N(0, G(tau_i))``.

    ``init`` is ``"stationary"`` or a fixed initial state vector.
    """
    times = _check_times(times)
    n = sys.n
    rng = np.random.default_rng(seed)
    mean = mean_response(sys)
    states = np.empty((times.size, n))
    if times.size == 0:
        return SamplePath(times, states, seed)
    if isinstance(init, str):
        if init != "stationary":
            raise ValueError(f"unknown init {init!r}")
        R0 = matfun.psd_sqrt(stationary_covariance(sys))
        x = mean + R0 @ rng.standard_normal(n)
    else:
        x = np.asarray(init, dtype=float).reshape(n).copy()
    states[0] = x
    cache: dict[float, tuple[np.ndarray, np.ndarray, np.ndarray]] = {}
    eye = np.eye(n)
    for i in range(1, times.size):
        tau = times[i] - times[i - 1]
        step = cache.get(tau)
        if step is None:
            Phi, G = matfun.van_loan_discretize(sys.A, sys.K, tau)
            step = (Phi, matfun.psd_sqrt(G), (eye - Phi) @ mean)
            if len(cache) < 4096:
                cache[tau] = step
        Phi, R, drift = step
        x = Phi @ x + drift + R @ rng.standard_normal(n)
        states[i] = x
    return SamplePath(times, states, seed)


def uniform_times(n: int, dt: float, t0: float = 0.0) -> np.ndarray:
    return t0 + dt * np.arange(n)


def observe_path(path: SamplePath, scheme: ObservationScheme, seed: int | None = 0) -> list[ObservationRecord]:
    """Noisy observations ``y_i = Z_i x(t_i) + m_i + xi_i`` at the scheme's times."""
    rng = np.random.default_rng(seed)
    idx = np.searchsorted(path.times, scheme.times)
    out = []
    n = path.states.shape[1]
    for k, (i, t) in enumerate(zip(idx, scheme.times)):
        if i >= path.times.size or not np.isclose(path.times[i], t, rtol=1e-12, atol=1e-12):
            raise InvalidTimes(f"scheme time {t} is not on the path")
        Z, m, H = scheme.Z[k], scheme.m[k], scheme.H[k]
        if Z.shape[1] != n:
            raise InvalidScheme(f"record {k}: Z has {Z.shape[1]} columns, state has {n}")
        y = Z @ path.states[i] + m
        if np.any(H):
            y = y + matfun.psd_sqrt(H) @ rng.standard_normal(len(m))
        out.append(ObservationRecord(float(t), y, Z, m, H))
    return out


def observe_channels(path: SamplePath, B, means, H, seed: int | None = 0, mask=None) -> np.ndarray:
    """Channel observations ``y = B x + means + noise`` as a (T, M) array.

    ``mask`` (T, M) of booleans marks which entries are observed; the rest are
    returned as NaN.
    """
    rng = np.random.default_rng(seed)
    B = np.atleast_2d(np.asarray(B, dtype=float))
    means = np.asarray(means, dtype=float)
    H = np.asarray(H, dtype=float)
    if H.ndim == 1:
        H = np.diag(H)
    M = B.shape[0]
    Y = path.states @ B.T + means
    if np.any(H):
        R = matfun.psd_sqrt(H)
        Y = Y + rng.standard_normal((len(Y), M)) @ R.T
    if mask is not None:
        Y = np.where(np.asarray(mask, dtype=bool), Y, np.nan)
    return Y
