"""Linear stochastic process models, their covariances, closed-form kernels
and the reduced mode-model family."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np
import scipy.linalg

from . import matfun
from .errors import DegenerateRates, InvalidInput, NotPsd, UnstableSystem

OMEGA_MIN = 1e-6
MODEL_FORMAT = "mode-model/1"


@dataclass(frozen=True)
class LtiSystem:
    """``dx = (A x + b) dt + noise`` with white-noise covariance rate K."""

    A: np.ndarray
    K: np.ndarray
    mean_forcing: np.ndarray | None = None

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        K = np.atleast_2d(np.asarray(self.K, dtype=float))
        n = A.shape[0]
        if A.size == 0:
            A = np.zeros((0, 0))
            K = np.zeros((0, 0))
            n = 0
        if A.shape != (n, n) or K.shape != (n, n):
            raise InvalidInput(f"A {A.shape} and K {K.shape} must be square and equal")
        if not (np.all(np.isfinite(A)) and np.all(np.isfinite(K))):
            raise InvalidInput("non-finite system matrices")
        b = np.zeros(n) if self.mean_forcing is None else np.asarray(self.mean_forcing, dtype=float).reshape(n)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "K", K)
        object.__setattr__(self, "mean_forcing", b)

    @property
    def n(self) -> int:
        return self.A.shape[0]

    def validate(self) -> "LtiSystem":
        stable, margin = matfun.is_stable(self.A)
        if not stable:
            raise UnstableSystem(f"drift not stable (margin {margin:.3e})")
        matfun.cholesky_psd(self.K)
        return self


def stationary_covariance(sys: LtiSystem) -> np.ndarray:
    return matfun.solve_lyapunov(sys.A, sys.K)


def lagged_covariance(sys: LtiSystem, tau: float, Sigma: np.ndarray | None = None) -> np.ndarray:
    """``E[x(t) x(t + tau)^T]`` for the stationary process."""
    if Sigma is None:
        Sigma = stationary_covariance(sys)
    if tau == 0:
        return Sigma.copy()
    if tau > 0:
        return Sigma @ matfun.expm(sys.A, tau).T
    return matfun.expm(sys.A, -tau) @ Sigma


def mean_response(sys: LtiSystem) -> np.ndarray:
    if sys.n == 0:
        return np.zeros(0)
    return -np.linalg.solve(sys.A, sys.mean_forcing)


# ---------------------------------------------------------------------------
# Closed-form kernels
# ---------------------------------------------------------------------------


def _positive(**kw):
    for k, v in kw.items():
        if not (np.isfinite(v) and v > 0):
            raise InvalidInput(f"{k} must be positive, got {v}")


@dataclass(frozen=True)
class OU:
    mu: float
    sigma: float

    def __post_init__(self):
        _positive(mu=self.mu, sigma=self.sigma)

    def realize(self) -> LtiSystem:
        return LtiSystem([[-self.mu]], [[self.sigma**2]])


@dataclass(frozen=True)
class Langevin:
    """``m x'' + beta x' + k x = sigma xi``; realised on ``(x, x')``."""

    m: float
    beta: float
    k: float
    sigma: float

    def __post_init__(self):
        _positive(m=self.m, beta=self.beta, k=self.k, sigma=self.sigma)

    @property
    def regime(self) -> str:
        disc = self.beta**2 / 4 - self.m * self.k
        if disc < 0:
            return "underdamped"
        if disc > 0:
            return "overdamped"
        return "critical"

    def realize(self) -> LtiSystem:
        m, b, k = self.m, self.beta, self.k
        return LtiSystem([[0.0, 1.0], [-k / m, -b / m]], [[0.0, 0.0], [0.0, self.sigma**2 / m**2]])


@dataclass(frozen=True)
class FOU:
    """Frequency deviation of a single aggregated node driven by an OU
    power imbalance: ``M f' = -gamma f + p``, ``p' = -J p + sigma xi``.

    Realised on ``(p, f)``.
    """

    M: float
    gamma: float
    J: float
    sigma: float

    def __post_init__(self):
        _positive(M=self.M, gamma=self.gamma, J=self.J, sigma=self.sigma)

    @property
    def Gamma(self) -> float:
        return self.gamma / self.M

    def realize(self) -> LtiSystem:
        return LtiSystem(
            [[-self.J, 0.0], [1.0 / self.M, -self.Gamma]],
            [[self.sigma**2, 0.0], [0.0, 0.0]],
        )

    def as_langevin(self) -> Langevin:
        """The overdamped Langevin process with rates ``Gamma`` and ``J``."""
        return Langevin(self.M, self.gamma + self.J * self.M, self.J * self.gamma, self.sigma)


KernelParams = Union[OU, Langevin, FOU]


def kernel_eval(p: KernelParams, tau: float) -> float:
    """Closed-form stationary covariance ``C(tau)`` of a scalar kernel."""
    t = abs(float(tau))
    if isinstance(p, OU):
        return p.sigma**2 / (2 * p.mu) * np.exp(-p.mu * t)
    if isinstance(p, Langevin):
        m, b, k, s2 = p.m, p.beta, p.k, p.sigma**2
        alpha = b / (2 * m)
        disc = b**2 / 4 - m * k
        if disc < 0:
            omega = np.sqrt(-disc) / m
            return s2 / (2 * b * k) * np.exp(-alpha * t) * (np.cos(omega * t) + alpha / omega * np.sin(omega * t))
        if disc > 0:
            eps = np.sqrt(disc) / m
            lp, lm = alpha + eps, alpha - eps
            return s2 / (4 * b * k * eps) * (lp * np.exp(-lm * t) - lm * np.exp(-lp * t))
        return s2 / (2 * b * k) * np.exp(-alpha * t) * (1 + alpha * t)
    if isinstance(p, FOU):
        G, J = p.Gamma, p.J
        if abs(G - J) <= 1e-10 * max(G, J):
            raise DegenerateRates("FOU kernel requires Gamma != J")
        pref = p.sigma**2 / (2 * J * p.M * p.gamma * (G**2 - J**2))
        return pref * (G * np.exp(-J * t) - J * np.exp(-G * t))
    raise InvalidInput(f"unknown kernel parameters {type(p).__name__}")


# ---------------------------------------------------------------------------
# Mode models
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ModeSpec:
    real_rates: tuple[float, ...] = ()
    complex_modes: tuple[tuple[float, float], ...] = ()

    def __post_init__(self):
        rr = tuple(float(x) for x in self.real_rates)
        cm = tuple((float(a), float(w)) for a, w in self.complex_modes)
        for x in rr:
            _positive(real_rate=x)
        for a, w in cm:
            _positive(alpha=a, omega=w)
        object.__setattr__(self, "real_rates", rr)
        object.__setattr__(self, "complex_modes", cm)

    @property
    def n_real(self) -> int:
        return len(self.real_rates)

    @property
    def n_complex(self) -> int:
        return len(self.complex_modes)

    @property
    def dim(self) -> int:
        return self.n_real + 2 * self.n_complex

    def mode_columns(self) -> list[tuple[int, ...]]:
        """State columns belonging to each mode, real modes first."""
        cols: list[tuple[int, ...]] = [(i,) for i in range(self.n_real)]
        base = self.n_real
        cols += [(base + 2 * j, base + 2 * j + 1) for j in range(self.n_complex)]
        return cols


def mode_block_diagonal(spec: ModeSpec) -> np.ndarray:
    blocks = [np.array([[-lam]]) for lam in spec.real_rates]
    blocks += [np.array([[-a, -w], [w, -a]]) for a, w in spec.complex_modes]
    if not blocks:
        return np.zeros((0, 0))
    return scipy.linalg.block_diag(*blocks)


@dataclass(frozen=True)
class ModeShapes:
    """Mode-shape matrix ``B`` (channels x mode coordinates) and the pinned
    channel of each mode."""

    B: np.ndarray
    pins: tuple[int, ...]

    def __post_init__(self):
        B = np.atleast_2d(np.asarray(self.B, dtype=float))
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "pins", tuple(int(p) for p in self.pins))

    def check(self, spec: ModeSpec, atol: float = 1e-12) -> None:
        if self.B.shape[1] != spec.dim:
            raise InvalidInput(f"B has {self.B.shape[1]} columns, spec needs {spec.dim}")
        if len(self.pins) != spec.n_real + spec.n_complex:
            raise InvalidInput("one pin per mode required")
        for cols, pin in zip(spec.mode_columns(), self.pins):
            if not 0 <= pin < self.B.shape[0]:
                raise InvalidInput(f"pin {pin} out of range")
            want = (1.0,) if len(cols) == 1 else (1.0, 0.0)
            got = tuple(self.B[pin, c] for c in cols)
            if not np.allclose(got, want, atol=atol):
                raise InvalidInput(f"pinned entries of mode at columns {cols} are {got}, expected {want}")


def pin_shapes(B: np.ndarray, spec: ModeSpec, pins: Sequence[int] | None = None) -> tuple[np.ndarray, tuple[int, ...], list[np.ndarray]]:
    """Rescale mode columns so that each mode's pinned entry is +1 (real) or
    (+1, 0) (complex).

    Returns the new B, the pins, and per-mode transforms ``T`` such that
    ``B_new = B_old T`` on that mode's columns. The compensating transform of
    the mode coordinates is ``x_new = T^{-1} x_old``.
    """
    B = np.array(B, dtype=float, copy=True)
    cols_all = spec.mode_columns()
    out_pins = []
    transforms = []
    for idx, cols in enumerate(cols_all):
        sub = B[:, cols]
        if pins is None:
            pin = int(np.argmax(np.linalg.norm(sub, axis=1)))
        else:
            pin = int(pins[idx])
        if len(cols) == 1:
            c = sub[pin, 0]
            if c == 0:
                raise InvalidInput("cannot pin a zero shape entry")
            T = np.array([[1.0 / c]])
        else:
            b1, b2 = sub[pin]
            w = complex(b1, -b2)
            if w == 0:
                raise InvalidInput("cannot pin a zero shape entry")
            # complex scaling by 1/w, expressed as a real 2x2 matrix acting on columns
            z = 1.0 / w
            T = np.array([[z.real, -z.imag], [z.imag, z.real]])
        B[:, cols] = sub @ T
        out_pins.append(pin)
        transforms.append(T)
    return B, tuple(out_pins), transforms


@dataclass(frozen=True)
class ModeModel:
    """Reduced stationary model: mode dynamics ``D``, driving covariance
    ``Q = Lambda Lambda^T``, observation ``y = B x + channel_means + noise``."""

    spec: ModeSpec
    shapes: ModeShapes
    noise_factor: np.ndarray
    channel_means: np.ndarray
    meas_noise: np.ndarray
    channel_names: tuple[str, ...] | None = None

    def __post_init__(self):
        N = self.spec.dim
        M = self.shapes.B.shape[0]
        Lam = np.asarray(self.noise_factor, dtype=float).reshape(N, N)
        if not np.allclose(Lam, np.tril(Lam)):
            raise InvalidInput("noise_factor must be lower triangular")
        mu = np.asarray(self.channel_means, dtype=float).reshape(M)
        H = np.asarray(self.meas_noise, dtype=float)
        if H.ndim == 1:
            H = np.diag(H)
        H = H.reshape(M, M)
        object.__setattr__(self, "noise_factor", Lam)
        object.__setattr__(self, "channel_means", mu)
        object.__setattr__(self, "meas_noise", H)
        if self.channel_names is not None:
            names = tuple(str(c) for c in self.channel_names)
            if len(names) != M:
                raise InvalidInput("channel_names length must match channel count")
            object.__setattr__(self, "channel_names", names)
        self.shapes.check(self.spec, atol=1e-9)

    @property
    def n_channels(self) -> int:
        return self.shapes.B.shape[0]

    @property
    def B(self) -> np.ndarray:
        return self.shapes.B

    @property
    def D(self) -> np.ndarray:
        return mode_block_diagonal(self.spec)

    @property
    def Q(self) -> np.ndarray:
        return self.noise_factor @ self.noise_factor.T

    @property
    def S(self) -> np.ndarray:
        """Stationary mode covariance (derived)."""
        return matfun.solve_lyapunov(self.D, self.Q)

    def mode_amplitudes(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.S), 0, None))

    def canonical(self) -> "ModeModel":
        """Reorder modes: real ascending in rate, complex ascending in alpha,
        ties by omega then pin."""
        spec = self.spec
        cols = spec.mode_columns()
        nr = spec.n_real
        real_order = sorted(range(nr), key=lambda i: (spec.real_rates[i], self.shapes.pins[i]))
        cplx_order = sorted(
            range(spec.n_complex),
            key=lambda j: (spec.complex_modes[j][0], spec.complex_modes[j][1], self.shapes.pins[nr + j]),
        )
        order = real_order + [nr + j for j in cplx_order]
        perm = [c for i in order for c in cols[i]]
        new_spec = ModeSpec(
            tuple(spec.real_rates[i] for i in real_order),
            tuple(spec.complex_modes[j] for j in cplx_order),
        )
        Q = self.Q[np.ix_(perm, perm)]
        return ModeModel(
            new_spec,
            ModeShapes(self.B[:, perm], tuple(self.shapes.pins[i] for i in order)),
            matfun.cholesky_psd(Q),
            self.channel_means,
            self.meas_noise,
            self.channel_names,
        )

    def complex_boundary_distance(self) -> list[float]:
        """omega / alpha per complex mode; small values flag proximity to the
        real/complex transition."""
        return [w / a for a, w in self.spec.complex_modes]

    # serialisation -------------------------------------------------------

    def to_dict(self) -> dict:
        N = self.spec.dim
        il = np.tril_indices(N)
        d = {
            "format": MODEL_FORMAT,
            "real_rates": list(self.spec.real_rates),
            "complex_modes": [list(m) for m in self.spec.complex_modes],
            "B": self.B.tolist(),
            "pins": list(self.shapes.pins),
            "Lambda": self.noise_factor[il].tolist(),
            "channel_means": self.channel_means.tolist(),
            "meas_noise": self.meas_noise.tolist(),
        }
        if self.channel_names is not None:
            d["channels"] = list(self.channel_names)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModeModel":
        if d.get("format") != MODEL_FORMAT:
            raise InvalidInput(f"expected format {MODEL_FORMAT!r}, got {d.get('format')!r}")
        spec = ModeSpec(tuple(d["real_rates"]), tuple(tuple(m) for m in d["complex_modes"]))
        N = spec.dim
        B = np.asarray(d["B"], dtype=float).reshape(-1, N)
        Lam = np.zeros((N, N))
        Lam[np.tril_indices(N)] = np.asarray(d["Lambda"], dtype=float)
        return cls(
            spec,
            ModeShapes(B, tuple(d["pins"])),
            Lam,
            np.asarray(d["channel_means"], dtype=float),
            np.asarray(d["meas_noise"], dtype=float),
            tuple(d["channels"]) if d.get("channels") else None,
        )

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)

    @classmethod
    def from_json(cls, text: str) -> "ModeModel":
        return cls.from_dict(json.loads(text))


def mode_realize(model: ModeModel) -> tuple[LtiSystem, np.ndarray, np.ndarray]:
    """State-space realisation over mode coordinates: ``(LtiSystem(D, Q), B, channel_means)``."""
    return LtiSystem(model.D, model.Q), model.B.copy(), model.channel_means.copy()


def mode_covariance(model: ModeModel, tau: float) -> np.ndarray:
    """Channel covariance ``B S exp(D^T tau) B^T`` (transpose for tau < 0)."""
    S = model.S
    B = model.B
    D = model.D
    if tau >= 0:
        return B @ S @ matfun.expm(D, tau).T @ B.T
    return B @ matfun.expm(D, -tau) @ S @ B.T


def psd_from_log(R: np.ndarray) -> np.ndarray:
    """``S = exp(R)`` for symmetric R (an alternative psd parameterisation)."""
    R = matfun.symmetrize(np.atleast_2d(np.asarray(R, dtype=float)))
    return matfun.symmetrize(matfun.expm(R))


def log_from_psd(S: np.ndarray) -> np.ndarray:
    S = matfun.symmetrize(np.atleast_2d(np.asarray(S, dtype=float)))
    w, V = np.linalg.eigh(S)
    if w[0] <= 0:
        raise NotPsd("matrix logarithm needs a positive-definite matrix")
    return (V * np.log(w)) @ V.T


def parameter_dimension(n_real: int, n_complex: int, k: int) -> int:
    """Free-parameter count for fitting modes to ``k`` PMUs (``M = 2k - 1``
    channels, one shared mean frequency, ``k - 1`` mean phase differences).

    The itemised count is checked against both closed forms.
    """
    if n_real < 0 or n_complex < 0 or k < 1:
        raise InvalidInput("need n_real, n_complex >= 0 and k >= 1")
    M = 2 * k - 1
    N = n_real + 2 * n_complex
    itemised = (
        n_real
        + 2 * n_complex
        + n_real * (M - 1)
        + n_complex * (2 * M - 2)
        + N * (N + 1) // 2
        + 1
        + (k - 1)
    )
    # closed forms, kept in integer arithmetic: N(2k + (N-1)/2) + k and (N+1)(M + N/2)
    assert 2 * itemised == N * (4 * k + N - 1) + 2 * k
    assert 2 * (itemised + k - 1) == (N + 1) * (2 * M + N)
    return itemised
