"""Fitting mode models: charts, priors, batch MAP fits, model comparison and
streaming tracking.

The optimiser works on an unconstrained vector ``theta`` (a :class:`Chart`)
whose every value maps to a valid :class:`~mode_sleuth.model.ModeModel`:

* ``log lambda`` per real mode; ``log alpha`` and ``log(omega - omega_min)``
  per complex mode;
* the free (unpinned) entries of ``B``;
* the lower triangle of ``Lambda`` (``Q = Lambda Lambda^T``) with the
  diagonal in log;
* one mean per mean group;
* optionally ``log(H_jj - floor_j)`` per channel (diagonal measurement noise).
"""

from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

import numpy as np

from . import kalman, matfun, spectral
from .data import ChannelData
from .errors import InvalidInput, NoConvergence, NotPsd, SingularInnovation, UnstableSystem
from .model import OMEGA_MIN, LtiSystem, ModeModel, ModeShapes, ModeSpec, mode_block_diagonal, pin_shapes

log = logging.getLogger(__name__)

LOG_2PI = math.log(2 * math.pi)


def max_threads() -> int:
    try:
        return max(1, int(os.environ.get("MODE_SLEUTH_THREADS", "1")))
    except ValueError:
        return 1


# ---------------------------------------------------------------------------
# Chart
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Chart:
    """Coordinate chart for a mode family with fixed pins."""

    n_real: int
    n_complex: int
    n_channels: int
    pins: tuple[int, ...]
    mean_groups: tuple[int, ...] | None = None
    fit_noise: bool = True
    noise_floor: tuple[float, ...] | None = None
    fixed_noise: np.ndarray | None = None
    omega_min: float = OMEGA_MIN
    channel_names: tuple[str, ...] | None = None

    def __post_init__(self):
        M = self.n_channels
        if len(self.pins) != self.n_real + self.n_complex:
            raise InvalidInput("one pin per mode required")
        if any(not 0 <= p < M for p in self.pins):
            raise InvalidInput("pin out of range")
        groups = tuple(range(M)) if self.mean_groups is None else tuple(int(g) for g in self.mean_groups)
        if len(groups) != M:
            raise InvalidInput("mean_groups needs one entry per channel")
        # relabel groups as 0..G-1 in order of first appearance
        relabel: dict[int, int] = {}
        groups = tuple(relabel.setdefault(g, len(relabel)) for g in groups)
        object.__setattr__(self, "mean_groups", groups)
        floor = (0.0,) * M if self.noise_floor is None else tuple(float(f) for f in self.noise_floor)
        object.__setattr__(self, "noise_floor", floor)
        if not self.fit_noise:
            H = np.zeros((M, M)) if self.fixed_noise is None else np.asarray(self.fixed_noise, dtype=float)
            if H.ndim == 1:
                H = np.diag(H)
            object.__setattr__(self, "fixed_noise", H.reshape(M, M))

    # layout ---------------------------------------------------------------

    @property
    def n_state(self) -> int:
        return self.n_real + 2 * self.n_complex

    @property
    def n_groups(self) -> int:
        return max(self.mean_groups) + 1 if self.mean_groups else 0

    @property
    def spec_columns(self) -> list[tuple[int, ...]]:
        return ModeSpec((1.0,) * self.n_real, ((1.0, 1.0),) * self.n_complex).mode_columns()

    def _free_b(self) -> list[tuple[int, int]]:
        out = []
        for cols, pin in zip(self.spec_columns, self.pins):
            for r in range(self.n_channels):
                if r == pin:
                    continue
                for c in cols:
                    out.append((r, c))
        return out

    def layout(self) -> dict[str, slice]:
        nr, nc, N, M = self.n_real, self.n_complex, self.n_state, self.n_channels
        sizes = [
            ("log_lambda", nr),
            ("log_alpha", nc),
            ("log_omega", nc),
            ("B", len(self._free_b())),
            ("Lambda", N * (N + 1) // 2),
            ("mean", self.n_groups),
            ("log_noise", M if self.fit_noise else 0),
        ]
        out, i = {}, 0
        for name, n in sizes:
            out[name] = slice(i, i + n)
            i += n
        return out

    @property
    def dim(self) -> int:
        return self.layout()["log_noise"].stop

    def labels(self) -> list[str]:
        lab = [f"log_lambda[{i}]" for i in range(self.n_real)]
        lab += [f"log_alpha[{j}]" for j in range(self.n_complex)]
        lab += [f"log_omega[{j}]" for j in range(self.n_complex)]
        lab += [f"B[{r},{c}]" for r, c in self._free_b()]
        N = self.n_state
        for i, j in zip(*np.tril_indices(N)):
            lab.append(f"log_Lambda[{i},{i}]" if i == j else f"Lambda[{i},{j}]")
        lab += [f"mean[{g}]" for g in range(self.n_groups)]
        if self.fit_noise:
            lab += [f"log_noise[{j}]" for j in range(self.n_channels)]
        return lab

    def kinds(self) -> list[str]:
        """Parameter class of each coordinate (used for priors and steps)."""
        lay = self.layout()
        kinds = [""] * self.dim
        for name, sl in lay.items():
            for i in range(sl.start, sl.stop):
                kinds[i] = name
        N = self.n_state
        tri = list(zip(*np.tril_indices(N)))
        for k, (i, j) in enumerate(tri):
            kinds[lay["Lambda"].start + k] = "log_Lambda_diag" if i == j else "Lambda_off"
        return kinds

    # maps -------------------------------------------------------------------

    def pack(self, model: ModeModel) -> np.ndarray:
        spec = model.spec
        if (spec.n_real, spec.n_complex, model.n_channels) != (self.n_real, self.n_complex, self.n_channels):
            raise InvalidInput("model family does not match chart")
        if tuple(model.shapes.pins) != tuple(self.pins):
            raise InvalidInput(f"model pins {model.shapes.pins} differ from chart pins {self.pins}")
        lay = self.layout()
        th = np.empty(self.dim)
        th[lay["log_lambda"]] = np.log(spec.real_rates)
        th[lay["log_alpha"]] = np.log([a for a, _ in spec.complex_modes])
        w = np.array([w for _, w in spec.complex_modes])
        if np.any(w <= self.omega_min):
            raise InvalidInput("complex-mode frequency at or below omega_min")
        th[lay["log_omega"]] = np.log(w - self.omega_min)
        th[lay["B"]] = [model.B[r, c] for r, c in self._free_b()]
        N = self.n_state
        Lam = model.noise_factor
        il = np.tril_indices(N)
        vals = Lam[il].copy()
        diag = il[0] == il[1]
        if np.any(vals[diag] <= 0):
            raise InvalidInput("Lambda must have a positive diagonal")
        vals[diag] = np.log(vals[diag])
        th[lay["Lambda"]] = vals
        means = np.zeros(self.n_groups)
        for g in range(self.n_groups):
            means[g] = model.channel_means[self.mean_groups.index(g)]
        th[lay["mean"]] = means
        if self.fit_noise:
            h = np.diag(model.meas_noise) - np.asarray(self.noise_floor)
            if np.any(h <= 0):
                raise InvalidInput("measurement noise at or below its floor")
            th[lay["log_noise"]] = np.log(h)
        return th

    def unpack(self, theta) -> ModeModel:
        return self._build(np.asarray(theta, dtype=float), False)[0]

    def unpack_with_derivatives(self, theta):
        """Model plus ``(dD, dQ, dB, dmu, dH)`` with the parameter index leading."""
        return self._build(np.asarray(theta, dtype=float), True)

    def _build(self, th: np.ndarray, want_deriv: bool):
        if th.shape != (self.dim,):
            raise InvalidInput(f"theta has shape {th.shape}, chart needs ({self.dim},)")
        if not np.all(np.isfinite(th)):
            raise InvalidInput("non-finite parameter vector")
        lay = self.layout()
        nr, nc, N, M, P = self.n_real, self.n_complex, self.n_state, self.n_channels, self.dim
        lam = np.exp(th[lay["log_lambda"]])
        alpha = np.exp(th[lay["log_alpha"]])
        womg = np.exp(th[lay["log_omega"]])
        omega = womg + self.omega_min
        spec = ModeSpec(tuple(lam), tuple(zip(alpha, omega)))
        B = np.zeros((M, N))
        for cols, pin in zip(self.spec_columns, self.pins):
            B[pin, cols[0]] = 1.0
        free = self._free_b()
        for (r, c), v in zip(free, th[lay["B"]]):
            B[r, c] = v
        il = np.tril_indices(N)
        diag = il[0] == il[1]
        vals = th[lay["Lambda"]].copy()
        vals[diag] = np.exp(vals[diag])
        Lam = np.zeros((N, N))
        Lam[il] = vals
        mean_vals = th[lay["mean"]]
        mu = mean_vals[list(self.mean_groups)] if M else np.zeros(0)
        if self.fit_noise:
            hv = np.exp(th[lay["log_noise"]])
            H = np.diag(hv + np.asarray(self.noise_floor))
        else:
            H = self.fixed_noise.copy()
        model = ModeModel(spec, ModeShapes(B, self.pins), Lam, mu, H, self.channel_names)
        if not want_deriv:
            return model, None
        dD = np.zeros((P, N, N))
        for i in range(nr):
            dD[lay["log_lambda"].start + i, i, i] = -lam[i]
        for j in range(nc):
            c = nr + 2 * j
            pa = lay["log_alpha"].start + j
            dD[pa, c, c] = dD[pa, c + 1, c + 1] = -alpha[j]
            pw = lay["log_omega"].start + j
            dD[pw, c, c + 1] = -womg[j]
            dD[pw, c + 1, c] = womg[j]
        dB = np.zeros((P, M, N))
        for k, (r, c) in enumerate(free):
            dB[lay["B"].start + k, r, c] = 1.0
        dQ = np.zeros((P, N, N))
        for k, (i, j) in enumerate(zip(*il)):
            p = lay["Lambda"].start + k
            dLam = np.zeros((N, N))
            dLam[i, j] = Lam[i, j] if i == j else 1.0
            t = dLam @ Lam.T
            dQ[p] = t + t.T
        dmu = np.zeros((P, M))
        for ch, g in enumerate(self.mean_groups):
            dmu[lay["mean"].start + g, ch] = 1.0
        dH = np.zeros((P, M, M))
        if self.fit_noise:
            for ch in range(M):
                dH[lay["log_noise"].start + ch, ch, ch] = hv[ch]
        return model, (dD, dQ, dB, dmu, dH)

    def to_dict(self) -> dict:
        d = {
            "n_real": self.n_real,
            "n_complex": self.n_complex,
            "n_channels": self.n_channels,
            "pins": list(self.pins),
            "mean_groups": list(self.mean_groups),
            "fit_noise": self.fit_noise,
            "noise_floor": list(self.noise_floor),
            "labels": self.labels(),
        }
        if not self.fit_noise:
            d["fixed_noise"] = self.fixed_noise.tolist()
        return d


def chart_for(model: ModeModel, **kw) -> Chart:
    return Chart(model.spec.n_real, model.spec.n_complex, model.n_channels, model.shapes.pins,
                 channel_names=model.channel_names, **kw)


def grid_chart(n_real: int, n_complex: int, k: int, pins: Sequence[int], noise=None) -> Chart:
    """Chart for the PMU observable set: channels ``f_1..f_k`` then ``k - 1``
    phase differences; the frequency channels share one mean and the
    measurement noise is held fixed, so ``dim == parameter_dimension``."""
    M = 2 * k - 1
    groups = [0] * k + list(range(1, k))
    return Chart(n_real, n_complex, M, tuple(pins), tuple(groups), fit_noise=False,
                 fixed_noise=np.zeros((M, M)) if noise is None else noise)


# ---------------------------------------------------------------------------
# Evidence on channel data
# ---------------------------------------------------------------------------


class Evidence:
    """Log-evidence and gradient of ``data`` as a function of ``theta``."""

    def __init__(self, data: ChannelData, chart: Chart):
        if data.n_channels != chart.n_channels:
            raise InvalidInput("data and chart disagree on the channel count")
        if len(data) == 0:
            raise InvalidInput("no observations")
        self.data = data
        self.chart = chart
        pat_idx, self.patterns = data.patterns()
        dims = np.array([len(p) for p in self.patterns], dtype=np.int64)
        dmax = int(dims.max())
        Y = np.zeros((len(data), dmax))
        for k, idx in enumerate(self.patterns):
            rows = pat_idx == k
            Y[rows, : len(idx)] = data.values[np.ix_(rows, idx)]
        self.packed = kalman.PackedRecords.build(data.times, Y, pat_idx, dims)
        self.dmax = dmax
        self.n_evals = 0

    def _obs_arrays(self, model: ModeModel, derivs=None):
        nk = len(self.patterns)
        N = model.spec.dim
        B, mu, H = model.B, model.channel_means, model.meas_noise
        Zs = np.zeros((nk, self.dmax, N))
        ms = np.zeros((nk, self.dmax))
        Hs = np.zeros((nk, self.dmax, self.dmax))
        for k, idx in enumerate(self.patterns):
            d = len(idx)
            Zs[k, :d] = B[idx]
            ms[k, :d] = mu[idx]
            Hs[k, :d, :d] = H[np.ix_(idx, idx)]
        if derivs is None:
            return Zs, ms, Hs, None, None, None
        _, _, dB, dmu, dH = derivs
        P = dB.shape[0]
        dZs = np.zeros((nk, P, self.dmax, N))
        dms = np.zeros((nk, P, self.dmax))
        dHs = np.zeros((nk, P, self.dmax, self.dmax))
        for k, idx in enumerate(self.patterns):
            d = len(idx)
            dZs[k, :, :d] = dB[:, idx]
            dms[k, :, :d] = dmu[:, idx]
            dHs[k, :, :d, :d] = dH[:, idx][:, :, idx]
        return Zs, ms, Hs, dZs, dms, dHs

    def model_value(self, model: ModeModel) -> float:
        sys = LtiSystem(model.D, model.Q)
        Zs, ms, Hs, *_ = self._obs_arrays(model)
        return kalman.filter_packed(sys, self.packed, Zs, ms, Hs).L

    def value(self, theta) -> float:
        self.n_evals += 1
        return self.model_value(self.chart.unpack(theta))

    def value_and_grad(self, theta) -> tuple[float, np.ndarray]:
        self.n_evals += 1
        model, derivs = self.chart.unpack_with_derivatives(theta)
        dD, dQ = derivs[0], derivs[1]
        sys = LtiSystem(model.D, model.Q)
        dsys = kalman.SystemGradient(dD, dQ)
        Zs, ms, Hs, dZs, dms, dHs = self._obs_arrays(model, derivs)
        st = kalman.filter_packed(sys, self.packed, Zs, ms, Hs, dsys, dZs, dms, dHs)
        return st.L, st.dL

    def records(self, model: ModeModel) -> list[kalman.ObservationRecord]:
        """Explicit records of the data under ``model`` (for the reference engine)."""
        out = []
        pat_idx = self.packed.pat_idx
        for i, t in enumerate(self.data.times):
            idx = self.patterns[pat_idx[i]]
            y = self.data.values[i, idx]
            out.append(kalman.ObservationRecord(float(t), y, model.B[idx], model.channel_means[idx],
                                                model.meas_noise[np.ix_(idx, idx)]))
        return out


# ---------------------------------------------------------------------------
# Priors
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Prior:
    """Independent Gaussians in chart coordinates, i.e. log-normal on rates,
    frequencies, Lambda diagonal and noise, Gaussian on shape entries,
    off-diagonal Lambda entries and means."""

    mean: np.ndarray
    sd: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.mean, dtype=float)
        s = np.asarray(self.sd, dtype=float)
        if m.shape != s.shape or np.any(~(s > 0)) or not np.all(np.isfinite(m)):
            raise InvalidInput("prior needs finite means and positive sds of equal length")
        object.__setattr__(self, "mean", m)
        object.__setattr__(self, "sd", s)

    def logpdf(self, theta) -> float:
        z = (np.asarray(theta) - self.mean) / self.sd
        return float(-0.5 * z @ z - np.sum(np.log(self.sd)) - 0.5 * len(z) * LOG_2PI)

    def grad(self, theta) -> np.ndarray:
        return -(np.asarray(theta) - self.mean) / self.sd**2

    @property
    def precision(self) -> np.ndarray:
        return 1.0 / self.sd**2

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "sd": self.sd.tolist()}


@dataclass(frozen=True)
class DataScales:
    """Summary scales of a data set used by the default prior and noise floor."""

    rate: float  # geometric mean of 2 pi / duration and pi / dt
    mean: np.ndarray
    var: np.ndarray

    @classmethod
    def of(cls, data: ChannelData) -> "DataScales":
        dt = data.median_dt()
        T = max(data.duration, dt)
        rate = math.sqrt((2 * math.pi / T) * (math.pi / dt))
        mean, var = data.channel_stats()
        ref = np.maximum(var, 1e-6 * mean**2)
        ref = np.where(ref > 0, ref, 1e-12)
        return cls(rate, mean, ref)


def default_noise_floor(data: ChannelData) -> tuple[float, ...]:
    sc = DataScales.of(data)
    return tuple(float(v) for v in 1e-9 * sc.var)


def default_prior(chart: Chart, data: ChannelData, log_sd: float = 2.0) -> Prior:
    """Weakly informative proper prior scaled to the data.

    Rates and frequencies: log-normal with median equal to the geometric mean
    of the lowest resolvable angular frequency and the Nyquist frequency,
    log-sd ``log_sd``. Shape entries: N(0, (10 r)^2) with ``r`` the spread of
    channel scales. Lambda diagonal: log-normal around ``sqrt(2 rate var)``
    with log-sd 3; off-diagonals Gaussian with a matching scale. Means:
    Gaussian around the sample mean. Noise: log-normal around a tenth of the
    channel variance, log-sd 3.
    """
    sc = DataScales.of(data)
    lay = chart.layout()
    m = np.zeros(chart.dim)
    s = np.ones(chart.dim)
    lr = math.log(sc.rate)
    for name in ("log_lambda", "log_alpha", "log_omega"):
        m[lay[name]] = lr
        s[lay[name]] = log_sd
    std = np.sqrt(sc.var)
    ratio = float(std.max() / std.min()) if std.size else 1.0
    s[lay["B"]] = 10.0 * ratio
    vbar = float(np.mean(sc.var)) if sc.var.size else 1.0
    lam_scale = math.sqrt(2 * sc.rate * vbar)
    kinds = chart.kinds()
    for i, k in enumerate(kinds):
        if k == "log_Lambda_diag":
            m[i], s[i] = math.log(lam_scale), 3.0
        elif k == "Lambda_off":
            m[i], s[i] = 0.0, 3.0 * lam_scale
    for g in range(chart.n_groups):
        chans = [c for c, gg in enumerate(chart.mean_groups) if gg == g]
        i = lay["mean"].start + g
        m[i] = float(np.mean(sc.mean[chans]))
        s[i] = 10.0 * math.sqrt(float(np.max(sc.var[chans])))
    if chart.fit_noise:
        m[lay["log_noise"]] = np.log(0.1 * sc.var)
        s[lay["log_noise"]] = 3.0
    return Prior(m, s)


# ---------------------------------------------------------------------------
# Initialisation from spectra
# ---------------------------------------------------------------------------


@dataclass
class InitReport:
    peaks_hz: list[float]
    random_complex: int
    knee_hz: float | None


def _peak_candidates(freqs, S, min_ratio: float = 4.0):
    from scipy.ndimage import median_filter

    nf = len(S)
    width = max(11, (nf // 8) | 1)
    base = median_filter(S, size=width, mode="nearest")
    ratio = S / np.maximum(base, 1e-300)
    cands = []
    for i in range(2, nf - 1):
        if ratio[i] > min_ratio and S[i] >= S[i - 1] and S[i] >= S[i + 1]:
            cands.append(i)
    cands.sort(key=lambda i: -ratio[i])
    chosen: list[int] = []
    for i in cands:
        if all(abs(i - j) > 3 for j in chosen):
            chosen.append(i)
    return chosen, base


def _refine_peak(freqs, S, i) -> float:
    if 0 < i < len(S) - 1 and np.all(S[i - 1:i + 2] > 0):
        a, b, c = np.log(S[i - 1:i + 2])
        den = a - 2 * b + c
        shift = 0.5 * (a - c) / den if den < 0 else 0.0
        shift = float(np.clip(shift, -0.5, 0.5))
        return float(freqs[i] + shift * (freqs[1] - freqs[0]))
    return float(freqs[i])


def _hwhm(freqs, S, base, i) -> float:
    """Half width at half maximum (Hz) of the velocity-spectrum excess at bin ``i``."""
    W2 = freqs**2
    ex = W2 * (S - base)
    half = 0.5 * ex[i]
    lo = i
    while lo > 0 and ex[lo] > half:
        lo -= 1
    hi = i
    while hi < len(S) - 1 and ex[hi] > half:
        hi += 1

    def cross(j0, j1):
        y0, y1 = ex[j0], ex[j1]
        if y0 == y1:
            return freqs[j0]
        return freqs[j0] + (half - y0) * (freqs[j1] - freqs[j0]) / (y1 - y0)

    f_lo = cross(lo, lo + 1) if lo < i else freqs[i]
    f_hi = cross(hi - 1, hi) if hi > i else freqs[i]
    return max(0.5 * (f_hi - f_lo), 0.5 * (freqs[1] - freqs[0]))


def init_heuristic(data: ChannelData, n_real: int, n_complex: int, rng: np.random.Generator | int | None = 0,
                   chart_kw: dict | None = None) -> tuple[ModeModel, InitReport]:
    """Spectral starting point: complex modes at Welch peaks (width gives the
    damping), shapes from the dominant cross-spectral eigenvector at each
    peak, real rates from the low-frequency half-power knee."""
    rng = np.random.default_rng(rng)
    if len(data) < 64:
        raise InvalidInput("initialisation needs at least 64 samples")
    if data.is_uniform():
        dt = float(np.mean(np.diff(data.times)))
        Yu = data.values
    else:
        dt = data.median_dt()
        _, Yu = data.resample_uniform(dt)
    sc = DataScales.of(data)
    mean = sc.mean
    std = np.sqrt(sc.var)
    Yn = (Yu - mean) / std
    M = data.n_channels
    segments = int(min(8, max(1, len(Yn) // 128)))
    freqs, C = spectral.cross_spectral_matrix(Yn, dt, segments=segments)
    S = np.real(np.einsum("fii->f", C))
    peaks, base = _peak_candidates(freqs, S)
    peaks = peaks[:n_complex]
    peaks.sort(key=lambda i: freqs[i])
    nyq = 0.5 / dt
    complex_modes = []
    shapes = []
    for i in peaks:
        f0 = _refine_peak(freqs, S, i)
        hw = _hwhm(freqs, S, base, i)
        complex_modes.append((2 * np.pi * hw, 2 * np.pi * f0))
        w, V = np.linalg.eigh(C[i])
        v = V[:, -1] * std
        shapes.append(v)
    n_random = n_complex - len(peaks)
    if n_random:
        lo, hi = math.log(2 * math.pi * 4 / max(data.duration, dt)), math.log(2 * math.pi * nyq / 2)
        ws = np.sort(np.exp(rng.uniform(lo, hi, size=n_random)))
        log.info("only %d spectral peaks for %d complex modes; %d frequencies drawn at random",
                 len(peaks), n_complex, n_random)
        for w0 in ws:
            complex_modes.append((0.1 * w0, float(w0)))
            v = rng.standard_normal(M) + 1j * rng.standard_normal(M)
            shapes.append(v * std)
    # real modes from the low-frequency knee
    knee = None
    real_rates = []
    real_shapes = []
    if n_real:
        P0 = float(np.median(S[1:4])) if len(S) > 4 else float(S[0])
        below = np.flatnonzero((S < 0.5 * P0) & (np.arange(len(S)) > 0))
        knee = float(freqs[below[0]]) if below.size else float(freqs[-1] / 4)
        lam0 = 2 * np.pi * max(knee, freqs[1])
        kmax = max(2, int(below[0]) if below.size else len(S) // 8)
        Cl = np.real(C[1:kmax + 1].mean(axis=0))
        w, V = np.linalg.eigh(Cl)
        for r in range(n_real):
            real_rates.append(lam0 * 4.0 ** (r - (n_real - 1) / 2))
            real_shapes.append(V[:, -1 - (r % M)] * std)
    # assemble B with pins on the largest entries
    spec = ModeSpec(tuple(real_rates), tuple(complex_modes))
    N = spec.dim
    B = np.zeros((M, N))
    for r, v in enumerate(real_shapes):
        B[:, r] = v
    for j, v in enumerate(shapes):
        c = n_real + 2 * j
        B[:, c] = v.real
        B[:, c + 1] = -v.imag
    B, pins, _ = pin_shapes(B, spec)
    # Lambda: split each pinned channel's variance over the modes and noise
    share = 1.0 / (n_real + n_complex + 1)
    Lam = np.zeros((N, N))
    for r in range(n_real):
        Lam[r, r] = math.sqrt(2 * real_rates[r] * share * sc.var[pins[r]])
    for j, (a, _) in enumerate(complex_modes):
        c = n_real + 2 * j
        Lam[c, c] = Lam[c + 1, c + 1] = math.sqrt(2 * a * share * sc.var[pins[n_real + j]])
    kw = dict(chart_kw or {})
    fit_noise = kw.get("fit_noise", True)
    floor = np.asarray(kw.get("noise_floor") or default_noise_floor(data))
    if fit_noise:
        H = np.diag(floor + (share if N else 1.0) * sc.var)
    else:
        H = kw.get("fixed_noise")
        H = np.zeros((M, M)) if H is None else np.asarray(H, dtype=float)
    groups = kw.get("mean_groups")
    mu = mean.copy()
    if groups is not None:
        g = np.asarray(groups)
        for gg in np.unique(g):
            mu[g == gg] = mean[g == gg].mean()
    model = ModeModel(spec, ModeShapes(B, pins), Lam, mu, H, data.channels)
    return model, InitReport([freqs[i] for i in peaks], n_random, knee)


# ---------------------------------------------------------------------------
# Quasi-Newton ascent
# ---------------------------------------------------------------------------


@dataclass
class AscentResult:
    x: np.ndarray
    f: float
    g: np.ndarray
    iterations: int
    n_evals: int
    converged: bool
    message: str
    history: list[float] = field(default_factory=list)


def bfgs_maximize(fg, x0, max_iter: int = 400, gtol: float = 1e-5, ftol: float = 1e-10,
                  max_step: float = 2.0) -> AscentResult:
    """Maximise ``f`` with BFGS and Armijo backtracking.

    ``fg(x)`` returns ``(f, grad)``; exceptions or non-finite values count
    as an infeasible point and shrink the step. Every accepted step
    increases ``f`` (asserted).
    """
    x = np.asarray(x0, dtype=float).copy()
    n = x.size
    f, g = fg(x)
    if not (np.isfinite(f) and np.all(np.isfinite(g))):
        raise NoConvergence("objective not finite at the starting point", {"x0": x.tolist()})
    n_evals = 1
    Hinv = np.eye(n)
    scaled = False
    history = [f]
    small = 0
    message = "max_iter reached"
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        if np.max(np.abs(g)) <= gtol * max(1.0, abs(f)) ** 0.5:
            converged, message = True, "gradient tolerance"
            break
        p = Hinv @ g
        if not g @ p > 0:
            Hinv = np.eye(n)
            p = g.copy()
        pn = np.max(np.abs(p))
        if pn > max_step:
            p *= max_step / pn
        slope = g @ p
        t = 1.0
        accepted = False
        for _ in range(40):
            xn = x + t * p
            try:
                fn, gn = fg(xn)
                ok = np.isfinite(fn) and np.all(np.isfinite(gn))
            except (SingularInnovation, NotPsd, UnstableSystem, InvalidInput, np.linalg.LinAlgError, FloatingPointError, ValueError):
                ok = False
            n_evals += 1
            if ok and fn >= f + 1e-4 * t * slope:
                accepted = True
                break
            t *= 0.5
        if not accepted:
            converged = np.max(np.abs(g)) <= 1e-2 * max(1.0, abs(f)) ** 0.5
            message = "line search failed" + (" near a stationary point" if converged else "")
            break
        assert fn >= f, "accepted step decreased the objective"
        s = xn - x
        y = g - gn  # ascent: curvature of -f
        df = fn - f
        x, f, g = xn, fn, gn
        history.append(f)
        sy = s @ y
        if sy > 1e-12 * np.linalg.norm(s) * np.linalg.norm(y):
            if not scaled:
                Hinv = np.eye(n) * (sy / (y @ y))
                scaled = True
            rho = 1.0 / sy
            V = np.eye(n) - rho * np.outer(s, y)
            Hinv = V @ Hinv @ V.T + rho * np.outer(s, s)
        small = small + 1 if df <= ftol * max(1.0, abs(f)) else 0
        if small >= 3:
            converged, message = True, "objective change below tolerance"
            break
    return AscentResult(x, f, g, it, n_evals, converged, message, history)


# ---------------------------------------------------------------------------
# Batch fits
# ---------------------------------------------------------------------------


@dataclass
class FitResult:
    chart: Chart
    theta_hat: np.ndarray
    model: ModeModel
    log_evidence: float
    log_prior: float
    log_posterior: float
    hessian: np.ndarray
    posterior_sd: np.ndarray
    laplace_log_z: float
    bic: float
    bic_log_z: float
    laplace_ok: bool
    n_obs: int
    diagnostics: dict

    @property
    def log_z(self) -> float:
        """Laplace estimate, or the BIC one when the Hessian was not negative definite."""
        return self.laplace_log_z if self.laplace_ok else self.bic_log_z

    @property
    def family(self) -> tuple[int, int]:
        return self.chart.n_real, self.chart.n_complex

    def summary(self) -> dict:
        m = self.model
        return {
            "lambda": list(m.spec.real_rates),
            "alpha": [a for a, _ in m.spec.complex_modes],
            "omega": [w for _, w in m.spec.complex_modes],
            "amplitudes": m.mode_amplitudes().tolist(),
            "B": m.B.tolist(),
        }

    def to_report(self) -> dict:
        return {
            "family": {"n_real": self.chart.n_real, "n_complex": self.chart.n_complex},
            "theta_hat": self.theta_hat.tolist(),
            "labels": self.chart.labels(),
            "log_evidence": self.log_evidence,
            "log_posterior": self.log_posterior,
            "laplace_log_z": self.laplace_log_z if self.laplace_ok else None,
            "laplace_ok": self.laplace_ok,
            "bic": self.bic,
            "posterior_sd": self.posterior_sd.tolist(),
            "summary": self.summary(),
            "model": self.model.to_dict(),
            "chart": self.chart.to_dict(),
            "diagnostics": self.diagnostics,
        }


class Posterior:
    """Log posterior (evidence + prior) with gradient on a fixed chart."""

    def __init__(self, data: ChannelData, chart: Chart, prior: Prior):
        if prior.mean.shape != (chart.dim,):
            raise InvalidInput(f"prior has {prior.mean.size} entries, chart needs {chart.dim}")
        self.ev = Evidence(data, chart)
        self.prior = prior
        self.chart = chart

    def __call__(self, theta):
        L, dL = self.ev.value_and_grad(theta)
        return L + self.prior.logpdf(theta), dL + self.prior.grad(theta)

    def hessian(self, theta, steps=None) -> np.ndarray:
        """Central differences of the analytic gradient."""
        th = np.asarray(theta, dtype=float)
        n = th.size
        h = 1e-3 * self.prior.sd if steps is None else np.asarray(steps)
        Hm = np.zeros((n, n))
        for i in range(n):
            e = np.zeros(n)
            e[i] = h[i]
            gp = self(th + e)[1]
            gm = self(th - e)[1]
            Hm[:, i] = (gp - gm) / (2 * h[i])
        return 0.5 * (Hm + Hm.T)


def _chart_options(data: ChannelData, mean_groups, fit_noise, fixed_noise, noise_floor) -> dict:
    kw = {"mean_groups": mean_groups, "fit_noise": fit_noise}
    if fit_noise:
        kw["noise_floor"] = noise_floor if noise_floor is not None else default_noise_floor(data)
    else:
        kw["fixed_noise"] = fixed_noise
    return kw


def _jitter(theta, chart: Chart, rng: np.random.Generator, scale: float = 1.0) -> np.ndarray:
    sd = {"log_lambda": 0.5, "log_alpha": 0.5, "log_omega": 0.1, "B": 0.2, "log_Lambda_diag": 0.4,
          "Lambda_off": 0.0, "mean": 0.0, "log_noise": 0.5}
    out = np.array(theta, dtype=float)
    for i, k in enumerate(chart.kinds()):
        s = sd[k] * scale
        if k == "B":
            s *= max(abs(out[i]), 0.3)
        out[i] += s * rng.standard_normal()
    return out


def fit_mle(data: ChannelData, n_real: int, n_complex: int, prior: Prior | None = None, *,
            starts: int = 8, seed: int = 0, mean_groups=None, fit_noise: bool = True, fixed_noise=None,
            noise_floor=None, max_iter: int = 400, gtol: float = 1e-5, init: ModeModel | None = None,
            compute_hessian: bool = True, threads: int | None = None) -> FitResult:
    """Maximum a posteriori fit of an ``(n_real, n_complex)`` mode model.

    Runs BFGS ascent from the spectral initialisation and ``starts - 1``
    jittered copies, keeps the best, puts it in canonical mode order and
    evaluates a finite-difference Hessian for uncertainties and the Laplace
    evidence.
    """
    if len(data) == 0:
        raise InvalidInput("no observations")
    M = data.n_channels
    kw = _chart_options(data, mean_groups, fit_noise, fixed_noise, noise_floor)
    rng = np.random.default_rng(seed)
    if init is None:
        init_model, init_rep = init_heuristic(data, n_real, n_complex, rng, kw)
    else:
        init_model, init_rep = init, None
    chart = Chart(n_real, n_complex, M, init_model.shapes.pins, channel_names=data.channels, **kw)
    if chart.dim >= data.n_scalar_obs:
        log.warning("family (%d, %d) has %d parameters for %d scalar observations",
                    n_real, n_complex, chart.dim, data.n_scalar_obs)
    if prior is None:
        prior = default_prior(chart, data)
    post = Posterior(data, chart, prior)
    theta0 = chart.pack(init_model)
    inits = [theta0] + [_jitter(theta0, chart, rng) for _ in range(max(0, starts - 1))]

    def run(th):
        try:
            return bfgs_maximize(post, th, max_iter=max_iter, gtol=gtol)
        except (NoConvergence, SingularInnovation, NotPsd, UnstableSystem, InvalidInput, np.linalg.LinAlgError) as exc:
            return exc

    nthreads = threads or max_threads()
    if nthreads > 1 and len(inits) > 1:
        with ThreadPoolExecutor(max_workers=nthreads) as ex:
            results = list(ex.map(run, inits))
    else:
        results = [run(th) for th in inits]
    start_diag = []
    best = None
    for k, r in enumerate(results):
        if isinstance(r, Exception):
            start_diag.append({"start": k, "error": f"{type(r).__name__}: {r}"})
            continue
        start_diag.append({"start": k, "log_posterior": r.f, "iterations": r.iterations,
                           "evaluations": r.n_evals, "converged": r.converged, "message": r.message})
        if best is None or r.f > best.f:
            best = r
    if best is None:
        raise NoConvergence("all starts failed", {"starts": start_diag})
    # canonical order, re-expressed on the matching chart
    model = chart.unpack(best.x).canonical()
    chart = Chart(n_real, n_complex, M, model.shapes.pins, channel_names=data.channels, **kw)
    perm = _prior_permutation(chart, post.chart)
    prior = Prior(prior.mean[perm], prior.sd[perm])
    post = Posterior(data, chart, prior)
    theta = chart.pack(model)
    logpost, grad = post(theta)
    L = post.ev.value(theta)
    logprior = prior.logpdf(theta)
    d = chart.dim
    n_obs = data.n_scalar_obs
    bic = -2 * L + d * math.log(max(n_obs, 1))
    bic_log_z = L - 0.5 * d * math.log(max(n_obs, 1))
    if compute_hessian and d:
        Hm = post.hessian(theta)
        try:
            Lc = np.linalg.cholesky(-Hm)
            logdet = 2 * float(np.sum(np.log(np.diag(Lc))))
            laplace = logpost + 0.5 * d * LOG_2PI - 0.5 * logdet
            cov = np.linalg.inv(-Hm)
            sd = np.sqrt(np.clip(np.diag(cov), 0, None))
            ok = True
        except np.linalg.LinAlgError:
            laplace, sd, ok = float("nan"), np.full(d, np.nan), False
            log.warning("Hessian not negative definite for family (%d, %d); using BIC", n_real, n_complex)
    elif d == 0:
        Hm, laplace, sd, ok = np.zeros((0, 0)), logpost, np.zeros(0), True
    else:
        Hm, laplace, sd, ok = np.full((d, d), np.nan), float("nan"), np.full(d, np.nan), False
    diag = {
        "starts": start_diag,
        "best_start": int(np.argmax([s.get("log_posterior", -np.inf) for s in start_diag])),
        "gradient_norm": float(np.max(np.abs(grad))) if d else 0.0,
        "init_peaks_hz": init_rep.peaks_hz if init_rep else None,
        "init_random_complex": init_rep.random_complex if init_rep else None,
        "complex_boundary_distance": model.complex_boundary_distance(),
        "hessian_negative_definite": ok,
    }
    return FitResult(chart, theta, model, float(L), float(logprior), float(logpost), Hm, sd,
                     float(laplace), float(bic), float(bic_log_z), ok, n_obs, diag)


def _prior_permutation(new: Chart, old: Chart) -> np.ndarray:
    """Index map carrying prior entries to the re-pinned canonical chart,
    matching coordinates class by class in order. Exact for priors that are
    exchangeable within a class (the default prior is)."""
    kinds_new = new.kinds()
    kinds_old = old.kinds()
    pools: dict[str, list[int]] = {}
    for i, k in enumerate(kinds_old):
        pools.setdefault(k, []).append(i)
    out = []
    for k in kinds_new:
        out.append(pools[k].pop(0))
    return np.array(out, dtype=int)


# ---------------------------------------------------------------------------
# Model comparison
# ---------------------------------------------------------------------------


@dataclass
class ModelPosterior:
    candidates: list[tuple[int, int]]
    log_z: np.ndarray
    probabilities: np.ndarray
    selected: tuple[int, int]
    fits: list[FitResult | None]
    methods: list[str]

    def to_report(self) -> dict:
        rows = []
        for c, lz, p, f, m in zip(self.candidates, self.log_z, self.probabilities, self.fits, self.methods):
            rows.append({
                "n_real": c[0], "n_complex": c[1], "log_z": float(lz), "method": m,
                "posterior": float(p), "bic": f.bic if f else None,
                "log_evidence": f.log_evidence if f else None,
                "dimension": f.chart.dim if f else None,
            })
        return {"candidates": rows, "selected": {"n_real": self.selected[0], "n_complex": self.selected[1]}}


def compare_models(candidates: Sequence[tuple[int, int]], data: ChannelData, priors: dict | None = None,
                   model_log_prior: Sequence[float] | None = None, occam_nats: float = 1.0,
                   **fit_kw) -> ModelPosterior:
    """Posterior probabilities of mode-count candidates via Laplace evidences.

    Candidates whose Hessian is not negative definite fall back to the BIC
    evidence (flagged in ``methods``). The ``selected`` family is the
    posterior argmax, except that a smaller state dimension within
    ``occam_nats`` of the best log evidence wins.
    """
    cands = [tuple(int(v) for v in c) for c in candidates]
    if not cands:
        raise InvalidInput("need at least one candidate")
    fits: list[FitResult | None] = []
    cache: dict[tuple[int, int], FitResult] = {}
    for c in cands:
        if c not in cache:
            pr = (priors or {}).get(c)
            cache[c] = fit_mle(data, c[0], c[1], pr, **fit_kw)
        fits.append(cache[c])
    log_z = np.array([f.log_z for f in fits])
    methods = ["laplace" if f.laplace_ok else "bic" for f in fits]
    lp = np.zeros(len(cands)) if model_log_prior is None else np.asarray(model_log_prior, dtype=float)
    w = log_z + lp
    w = w - w.max()
    probs = np.exp(w)
    probs /= probs.sum()
    best = float(np.max(log_z + lp))
    near = [i for i in range(len(cands)) if log_z[i] + lp[i] >= best - occam_nats]
    near.sort(key=lambda i: (cands[i][0] + 2 * cands[i][1], fits[i].chart.dim, -(log_z[i] + lp[i])))
    return ModelPosterior(cands, log_z, probs, cands[near[0]], fits, methods)


# ---------------------------------------------------------------------------
# Streaming tracking
# ---------------------------------------------------------------------------


@dataclass
class TrackUpdate:
    t: float
    theta: np.ndarray
    model: ModeModel
    eps: float
    L: float
    L_disc: float
    x: np.ndarray
    rejected: bool = False

    def to_json_dict(self) -> dict:
        spec = self.model.spec
        return {
            "t": self.t,
            "omega": [w for _, w in spec.complex_modes],
            "alpha": [a for a, _ in spec.complex_modes],
            "lambda": list(spec.real_rates),
            "eps": self.eps,
            "L": self.L,
            "L_disc": self.L_disc,
            "x": self.x.tolist(),
        }


class StreamTracker:
    """Online maximum-likelihood tracking on the discounted evidence.

    After each record the parameters take one preconditioned step
    ``delta = eta * g / (I + delta_0)`` where ``g`` is the gradient of the
    discounted evidence plus a discounted prior term and ``I`` a running,
    equally discounted curvature estimate (sum of squared per-record
    gradients; ``step_rule="diagonal"``) or the full outer-product matrix
    (``step_rule="full"``). After a step the gradient accumulator is
    shifted by ``-I delta``, its value under the local quadratic model, so
    that stale gradient history is not re-applied.
    """

    def __init__(self, model0: ModeModel, forget: float, step_rule: str = "diagonal", step_size: float = 1.0,
                 prior: Prior | None = None, warmup: float | None = None, max_step: float = 0.05,
                 chart: Chart | None = None, noise_floor=None):
        if not forget > 0:
            raise InvalidInput("forget rate must be positive for tracking")
        if step_rule not in ("diagonal", "full", "none"):
            raise InvalidInput(f"unknown step rule {step_rule!r}")
        self.chart = chart or chart_for(model0, noise_floor=noise_floor or tuple(1e-12 * np.maximum(np.diag(model0.meas_noise), 1e-300)))
        self.theta = self.chart.pack(model0)
        self.forget = float(forget)
        self.step_rule = step_rule
        self.eta = float(step_size)
        self.prior = prior
        self.warmup = 1.0 / forget if warmup is None else float(warmup)
        self.max_step = float(max_step)
        P = self.chart.dim
        self.info = np.zeros((P, P)) if step_rule == "full" else np.zeros(P)
        self.t0: float | None = None
        self.state: kalman.FilterState | None = None
        self.n_rejected = 0
        self.name_index = {n: i for i, n in enumerate(model0.channel_names or ())}

    def _system(self, theta):
        model, derivs = self.chart.unpack_with_derivatives(theta)
        dD, dQ, dB, dmu, dH = derivs
        return model, LtiSystem(model.D, model.Q), kalman.SystemGradient(dD, dQ), dB, dmu, dH

    def update(self, t: float, row) -> TrackUpdate:
        """Consume one record; ``row`` holds one value per channel (NaN = missing)."""
        row = np.asarray(row, dtype=float)
        idx = np.flatnonzero(~np.isnan(row))
        model, sys, dsys, dB, dmu, dH = self._system(self.theta)
        if idx.size == 0:
            raise InvalidInput("record has no observed channel")
        rec = kalman.ObservationRecord(
            float(t), row[idx], model.B[idx], model.channel_means[idx], model.meas_noise[np.ix_(idx, idx)],
            dB[:, idx], dmu[:, idx], dH[:, idx][:, :, idx],
        )
        if self.state is None:
            self.state = kalman.init_stationary(sys, dsys)
            self.t0 = float(t)
            tau = 0.0
        else:
            tau = float(t) - self.state.t_last
        self.state, rep = kalman.step_with_gradient(self.state, sys, dsys, rec, self.forget)
        decay = math.exp(-self.forget * tau)
        ge = rep.d_eps
        if self.step_rule == "full":
            self.info = decay * self.info + np.outer(ge, ge)
        else:
            self.info = decay * self.info + ge * ge
        rejected = False
        if self.step_rule != "none" and float(t) - self.t0 >= self.warmup:
            rejected = not self._step(float(t))
        return TrackUpdate(float(t), self.theta.copy(), self.chart.unpack(self.theta), rep.eps,
                           self.state.L, self.state.L_disc, self.state.x.copy(), rejected)

    def _step(self, t: float) -> bool:
        g = self.state.dL_disc.copy()
        P = self.chart.dim
        w = math.exp(-self.forget * (t - self.t0))
        if self.prior is not None:
            g += w * self.prior.grad(self.theta)
            reg = w * self.prior.precision
        else:
            reg = np.zeros(P)
        floor = 1e-8 * (np.trace(self.info) / P if self.info.ndim == 2 else np.mean(self.info)) + 1e-12
        if self.info.ndim == 2:
            Imat = self.info + np.diag(reg + floor)
            delta = self.eta * np.linalg.solve(Imat, g)
        else:
            Imat = self.info + reg + floor
            delta = self.eta * g / Imat
        big = np.max(np.abs(delta))
        if big > self.max_step:
            delta *= self.max_step / big
        for _ in range(20):
            cand = self.theta + delta
            try:
                if np.all(np.isfinite(cand)):
                    m = self.chart.unpack(cand)
                    matfun.solve_lyapunov(m.D, m.Q)
                    break
            except (InvalidInput, UnstableSystem, NotPsd, np.linalg.LinAlgError):
                pass
            delta *= 0.5
            log.info("tracker step at t=%g rejected; halving", t)
        else:
            self.n_rejected += 1
            return False
        self.theta = cand
        corr = Imat @ delta if self.info.ndim == 2 else Imat * delta
        self.state.dL_disc = self.state.dL_disc - corr
        return True


def track_stream(model0: ModeModel, forget: float, records: Iterable[tuple[float, Sequence[float]]],
                 step_rule: str = "diagonal", **kw) -> Iterator[TrackUpdate]:
    """Yield a :class:`TrackUpdate` per ``(t, row)`` record."""
    tr = StreamTracker(model0, forget, step_rule, **kw)
    for t, row in records:
        yield tr.update(t, row)
