"""Streaming Kalman filter over irregular, partial observations.

Each record costs the same regardless of how many came before: a predict
over the elapsed interval using the exact discretisation, then a
conditioning step that yields the innovation and the evidence gain

    eps_i = -1/2 (v_i^T F_i^{-1} v_i + log det F_i + d_i log 2 pi).

Optionally the filter also carries forward-mode sensitivities of its state
with respect to a parameter vector, from which the gradients of the
cumulative and discounted evidence follow.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.linalg

from . import matfun
from .errors import InvalidScheme, InvalidTimes, NotPsd, SingularInnovation
from .model import LtiSystem, lagged_covariance, mean_response, stationary_covariance

LOG_2PI = math.log(2 * math.pi)


@dataclass(frozen=True)
class ObservationRecord:
    """One observation ``y = Z x(t) + m + xi`` with ``xi ~ N(0, H)``.

    ``dZ``, ``dm``, ``dH`` optionally hold derivatives with respect to the
    parameters (leading axis); ``None`` means they do not depend on them.
    """

    t: float
    y: np.ndarray
    Z: np.ndarray
    m: np.ndarray
    H: np.ndarray
    dZ: np.ndarray | None = None
    dm: np.ndarray | None = None
    dH: np.ndarray | None = None

    @property
    def d(self) -> int:
        return len(self.y)


@dataclass
class ObservationScheme:
    """Observation times with per-record selector, offset and noise."""

    times: np.ndarray
    Z: list[np.ndarray]
    m: list[np.ndarray]
    H: list[np.ndarray]

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float).ravel()
        n = len(self.times)
        if not (len(self.Z) == len(self.m) == len(self.H) == n):
            raise InvalidScheme("scheme fields differ in length")
        if np.any(np.diff(self.times) <= 0):
            raise InvalidTimes("scheme times must be strictly increasing")
        self.Z = [np.atleast_2d(np.asarray(z, dtype=float)) for z in self.Z]
        self.m = [np.asarray(v, dtype=float).ravel() for v in self.m]
        self.H = [np.atleast_2d(np.asarray(h, dtype=float)) for h in self.H]
        for k, (z, v, h) in enumerate(zip(self.Z, self.m, self.H)):
            d = z.shape[0]
            if d < 1 or v.shape != (d,) or h.shape != (d, d):
                raise InvalidScheme(f"record {k}: inconsistent shapes Z{z.shape} m{v.shape} H{h.shape}")

    def __len__(self):
        return len(self.times)

    def with_data(self, ys: Sequence[np.ndarray]) -> list[ObservationRecord]:
        if len(ys) != len(self):
            raise InvalidScheme("data length does not match scheme")
        return [
            ObservationRecord(float(t), np.asarray(y, dtype=float).ravel(), z, v, h)
            for t, y, z, v, h in zip(self.times, ys, self.Z, self.m, self.H)
        ]


def merge_simultaneous(records: Iterable[ObservationRecord]) -> list[ObservationRecord]:
    """Stack records sharing a timestamp into one block observation."""
    out: list[ObservationRecord] = []
    group: list[ObservationRecord] = []

    def flush():
        if not group:
            return
        if len(group) == 1:
            out.append(group[0])
        else:
            y = np.concatenate([r.y for r in group])
            Z = np.vstack([r.Z for r in group])
            m = np.concatenate([r.m for r in group])
            H = scipy.linalg.block_diag(*[r.H for r in group])
            dZ = dm = dH = None
            if any(r.dZ is not None or r.dm is not None or r.dH is not None for r in group):
                P = next(len(a) for r in group for a in (r.dZ, r.dm, r.dH) if a is not None)
                n = Z.shape[1]
                dZ = np.concatenate([r.dZ if r.dZ is not None else np.zeros((P, r.d, n)) for r in group], axis=1)
                dm = np.concatenate([r.dm if r.dm is not None else np.zeros((P, r.d)) for r in group], axis=1)
                dH = np.stack(
                    [scipy.linalg.block_diag(*[(r.dH[p] if r.dH is not None else np.zeros((r.d, r.d))) for r in group]) for p in range(P)]
                )
            out.append(ObservationRecord(group[0].t, y, Z, m, H, dZ, dm, dH))
        group.clear()

    for r in records:
        if group and r.t != group[-1].t:
            if r.t < group[-1].t:
                raise InvalidTimes("records must be in time order")
            flush()
        group.append(r)
    flush()
    return out


@dataclass(frozen=True)
class SystemGradient:
    """Derivatives of ``(A, K, mean_forcing)`` with respect to ``P`` parameters."""

    dA: np.ndarray
    dK: np.ndarray
    db: np.ndarray | None = None

    @property
    def n_params(self) -> int:
        return self.dA.shape[0]


@dataclass
class FilterState:
    t_last: float | None
    x: np.ndarray
    P: np.ndarray
    L: float = 0.0
    L_disc: float = 0.0
    dx: np.ndarray | None = None
    dP: np.ndarray | None = None
    dL: np.ndarray | None = None
    dL_disc: np.ndarray | None = None
    n_records: int = 0


@dataclass
class StepReport:
    v: np.ndarray
    F: np.ndarray
    gain: np.ndarray
    eps: float
    jitter: float = 0.0
    d_eps: np.ndarray | None = None


# ---------------------------------------------------------------------------
# Initialisation and prediction
# ---------------------------------------------------------------------------


def _mean_derivative(sys: LtiSystem, dsys: SystemGradient, xbar: np.ndarray) -> np.ndarray:
    # x = -A^{-1} b  =>  dx = -A^{-1}(dA x + db)
    P = dsys.n_params
    if sys.n == 0 or (dsys.db is None and not xbar.any()):
        return np.zeros((P, sys.n))
    db = dsys.db if dsys.db is not None else np.zeros((P, sys.n))
    return -np.linalg.solve(sys.A, (dsys.dA @ xbar + db).T).T


def _stationary_derivatives(sys: LtiSystem, dsys: SystemGradient, xbar: np.ndarray, Sigma: np.ndarray):
    A = sys.A
    n = sys.n
    P = dsys.n_params
    if n == 0:
        return np.zeros((P, 0)), np.zeros((P, 0, 0))
    dx = _mean_derivative(sys, dsys, xbar)
    # A dS + dS A^T = -(dK + dA S + S dA^T)
    rhs = dsys.dK + dsys.dA @ Sigma + Sigma @ np.swapaxes(dsys.dA, 1, 2)
    dS = np.stack([matfun.symmetrize(scipy.linalg.solve_continuous_lyapunov(A, -rhs[p])) for p in range(P)]) if P else np.zeros((0, n, n))
    return dx, dS


def init_stationary(sys: LtiSystem, dsys: SystemGradient | None = None) -> FilterState:
    """Prior at the first observation: the stationary law of ``sys``."""
    xbar = mean_response(sys)
    Sigma = stationary_covariance(sys)
    st = FilterState(None, xbar, Sigma)
    if dsys is not None:
        st.dx, st.dP = _stationary_derivatives(sys, dsys, xbar, Sigma)
        st.dL = np.zeros(dsys.n_params)
        st.dL_disc = np.zeros(dsys.n_params)
    return st


class _Propagator:
    """Caches the discretisation (and its derivatives) per interval length."""

    def __init__(self, sys: LtiSystem, dsys: SystemGradient | None = None, max_cache: int = 4096):
        self.sys = sys
        self.dsys = dsys
        self.xbar = mean_response(sys)
        self.max_cache = max_cache
        self._cache: dict[float, tuple] = {}
        if dsys is not None:
            self.dxbar = _mean_derivative(sys, dsys, self.xbar)

    def __call__(self, tau: float):
        hit = self._cache.get(tau)
        if hit is not None:
            return hit
        A, K = self.sys.A, self.sys.K
        if self.dsys is None:
            Phi, G = matfun.van_loan_discretize(A, K, tau)
            out = (Phi, G, None, None)
        else:
            out = matfun.van_loan_derivatives(A, K, tau, self.dsys.dA, self.dsys.dK)
        if len(self._cache) < self.max_cache:
            self._cache[tau] = out
        return out


def predict(state: FilterState, sys: LtiSystem, tau: float) -> tuple[np.ndarray, np.ndarray]:
    """``x_pred = Phi x + (I - Phi) xbar``, ``P_pred = Phi P Phi^T + G``."""
    if not tau > 0:
        raise InvalidTimes(f"prediction interval must be positive, got {tau}")
    Phi, G = matfun.van_loan_discretize(sys.A, sys.K, tau)
    xbar = mean_response(sys)
    x = Phi @ (state.x - xbar) + xbar
    P = matfun.symmetrize(Phi @ state.P @ Phi.T + G)
    return x, P


# ---------------------------------------------------------------------------
# Conditioning
# ---------------------------------------------------------------------------


def _factor_innovation(F: np.ndarray) -> tuple[np.ndarray, float]:
    try:
        return np.linalg.cholesky(F), 0.0
    except np.linalg.LinAlgError:
        pass
    d = F.shape[0]
    jitter = 1e-12 * np.trace(F) / d
    if not jitter > 0:
        raise SingularInnovation("innovation covariance is singular")
    try:
        return np.linalg.cholesky(F + jitter * np.eye(d)), jitter
    except np.linalg.LinAlgError:
        raise SingularInnovation("innovation covariance is singular after jitter") from None


def update(x_pred, P_pred, Z, m, H, y) -> tuple[np.ndarray, np.ndarray, StepReport]:
    """Condition the prediction on ``y``; Joseph-form covariance update."""
    Z = np.atleast_2d(Z)
    v = np.asarray(y, dtype=float) - (Z @ x_pred + m)
    PZt = P_pred @ Z.T
    F = matfun.symmetrize(Z @ PZt + H)
    Lc, jitter = _factor_innovation(F)
    d = len(v)
    if jitter:
        F = F + jitter * np.eye(d)
    Finv = scipy.linalg.cho_solve((Lc, True), np.eye(d))
    a = Finv @ v
    gain = PZt @ Finv
    x = x_pred + gain @ v
    IKZ = np.eye(len(x_pred)) - gain @ Z
    P = matfun.symmetrize(IKZ @ P_pred @ IKZ.T + gain @ H @ gain.T)
    logdet = 2.0 * np.sum(np.log(np.diag(Lc)))
    eps = -0.5 * (v @ a + logdet + d * LOG_2PI)
    return x, P, StepReport(v, F, gain, float(eps), jitter)


def _update_with_gradient(x_pred, P_pred, dx_pred, dP_pred, rec: ObservationRecord):
    Z, m, H, y = rec.Z, rec.m, rec.H, rec.y
    n = len(x_pred)
    d = len(y)
    nP = dx_pred.shape[0]
    v = y - (Z @ x_pred + m)
    PZt = P_pred @ Z.T
    F = matfun.symmetrize(Z @ PZt + H)
    Lc, jitter = _factor_innovation(F)
    if jitter:
        F = F + jitter * np.eye(d)
    Finv = scipy.linalg.cho_solve((Lc, True), np.eye(d))
    a = Finv @ v
    gain = PZt @ Finv
    x = x_pred + gain @ v
    IKZ = np.eye(n) - gain @ Z
    P = matfun.symmetrize(IKZ @ P_pred @ IKZ.T + gain @ H @ gain.T)
    logdet = 2.0 * np.sum(np.log(np.diag(Lc)))
    eps = -0.5 * (v @ a + logdet + d * LOG_2PI)

    # sensitivities
    dv = -(dx_pred @ Z.T)
    ZdP = Z @ dP_pred  # (P, d, n)
    dF = ZdP @ Z.T
    dPZt = np.swapaxes(ZdP, 1, 2)  # dP Z^T
    if rec.dZ is not None:
        dv -= rec.dZ @ x_pred
        dZPZ = rec.dZ @ PZt  # (P, d, d)
        dF += dZPZ + np.swapaxes(dZPZ, 1, 2)
        dPZt = dPZt + P_pred @ np.swapaxes(rec.dZ, 1, 2)
    if rec.dm is not None:
        dv -= rec.dm
    if rec.dH is not None:
        dF += rec.dH
    d_eps = -(dv @ a) + 0.5 * np.einsum("i,pij,j->p", a, dF, a) - 0.5 * np.einsum("ij,pji->p", Finv, dF)
    dgain = (dPZt - gain @ dF) @ Finv  # (P, n, d)
    dx = dx_pred + dgain @ v + dv @ gain.T
    ZP = PZt.T
    t1 = dgain @ ZP
    dP = dP_pred - t1 - np.swapaxes(t1, 1, 2) - gain @ dF @ gain.T
    dP = matfun.symmetrize(dP)
    rep = StepReport(v, F, gain, float(eps), jitter, d_eps)
    return x, P, dx, dP, rep


# ---------------------------------------------------------------------------
# Steps and batch evaluation
# ---------------------------------------------------------------------------


def step(state: FilterState, sys: LtiSystem, record: ObservationRecord, forget: float = 0.0,
         _prop: _Propagator | None = None) -> tuple[FilterState, StepReport]:
    """Predict to ``record.t``, condition on it and accumulate evidence.

    ``L' = L + eps`` and ``L_disc' = exp(-forget tau) L_disc + eps``.
    """
    if forget < 0:
        raise ValueError("forget rate must be >= 0")
    if state.t_last is None:
        tau = 0.0
        x_pred, P_pred = state.x, state.P
    else:
        tau = record.t - state.t_last
        if not tau > 0:
            raise InvalidTimes(f"record at t={record.t} does not follow t={state.t_last}")
        if _prop is not None:
            Phi, G, _, _ = _prop(tau)
            xbar = _prop.xbar
            x_pred = Phi @ (state.x - xbar) + xbar
            P_pred = matfun.symmetrize(Phi @ state.P @ Phi.T + G)
        else:
            x_pred, P_pred = predict(state, sys, tau)
    x, P, rep = update(x_pred, P_pred, record.Z, record.m, record.H, record.y)
    decay = math.exp(-forget * tau) if tau else 1.0
    new = FilterState(record.t, x, P, state.L + rep.eps, decay * state.L_disc + rep.eps, n_records=state.n_records + 1)
    return new, rep


def step_with_gradient(state: FilterState, sys: LtiSystem, dsys: SystemGradient, record: ObservationRecord,
                       forget: float = 0.0, _prop: _Propagator | None = None) -> tuple[FilterState, StepReport]:
    """As :func:`step`, also propagating ``d/dtheta`` of the filter state.

    The returned report carries ``d_eps``; the new state carries ``dL`` and
    ``dL_disc``.
    """
    if state.dx is None:
        raise ValueError("state has no sensitivities; initialise with init_stationary(sys, dsys)")
    if forget < 0:
        raise ValueError("forget rate must be >= 0")
    if state.t_last is None:
        tau = 0.0
        x_pred, P_pred, dx_pred, dP_pred = state.x, state.P, state.dx, state.dP
    else:
        tau = record.t - state.t_last
        if not tau > 0:
            raise InvalidTimes(f"record at t={record.t} does not follow t={state.t_last}")
        prop = _prop if _prop is not None else _Propagator(sys, dsys, max_cache=0)
        Phi, G, dPhi, dG = prop(tau)
        xbar = prop.xbar
        dev = state.x - xbar
        x_pred = Phi @ dev + xbar
        dx_pred = dPhi @ dev + state.dx @ Phi.T + prop.dxbar - prop.dxbar @ Phi.T
        PhiP = Phi @ state.P
        P_pred = matfun.symmetrize(PhiP @ Phi.T + G)
        cross = dPhi @ PhiP.T
        dP_pred = cross + np.swapaxes(cross, 1, 2) + Phi @ state.dP @ Phi.T + dG
    x, P, dx, dP, rep = _update_with_gradient(x_pred, P_pred, dx_pred, dP_pred, record)
    decay = math.exp(-forget * tau) if tau else 1.0
    new = FilterState(
        record.t, x, P,
        state.L + rep.eps, decay * state.L_disc + rep.eps,
        dx, dP,
        state.dL + rep.d_eps, decay * state.dL_disc + rep.d_eps,
        n_records=state.n_records + 1,
    )
    return new, rep


def run_filter(sys: LtiSystem, records: Sequence[ObservationRecord], dsys: SystemGradient | None = None,
               forget: float = 0.0, state: FilterState | None = None,
               on_step: Callable[[FilterState, StepReport], None] | None = None) -> FilterState:
    """Fold :func:`step` (or :func:`step_with_gradient`) over ``records``."""
    if state is None:
        state = init_stationary(sys, dsys)
    prop = _Propagator(sys, dsys)
    if dsys is None:
        for rec in records:
            state, rep = step(state, sys, rec, forget, prop)
            if on_step is not None:
                on_step(state, rep)
    else:
        for rec in records:
            state, rep = step_with_gradient(state, sys, dsys, rec, forget, prop)
            if on_step is not None:
                on_step(state, rep)
    return state


def batch_evidence(sys: LtiSystem, records: Sequence[ObservationRecord]) -> float:
    """Total log-likelihood of ``records`` under the stationary process."""
    if len(records) == 0:
        return 0.0
    return run_filter(sys, records).L


# ---------------------------------------------------------------------------
# Dense Gaussian-process oracle
# ---------------------------------------------------------------------------


def dense_gp_loglik(cov, records: Sequence[ObservationRecord], state_mean: np.ndarray | None = None,
                    max_dim: int = 2000) -> float:
    """Joint Gaussian log-density of all records, built densely.

    ``cov`` is an LtiSystem or a callable ``tau -> E[x(t) x(t+tau)^T]``.
    Intended as a test oracle: cost is cubic in the total observation
    dimension.
    """
    sys = None
    if isinstance(cov, LtiSystem):
        sys = cov
        Sigma = stationary_covariance(sys)
        state_mean = mean_response(sys)
        cov = lambda tau: lagged_covariance(sys, tau, Sigma)  # noqa: E731
    dims = [r.d for r in records]
    total = sum(dims)
    if total == 0:
        return 0.0
    if total > max_dim:
        raise ValueError(f"observation dimension {total} exceeds {max_dim}")
    offs = np.concatenate([[0], np.cumsum(dims)])
    C = np.zeros((total, total))
    mu = np.zeros(total)
    y = np.zeros(total)
    if sys is not None:
        C, mu, y = _dense_lti_blocks(sys, Sigma, state_mean, records, offs)
    else:
        cache: dict[float, np.ndarray] = {}
        for i, ri in enumerate(records):
            si = slice(offs[i], offs[i + 1])
            xm = state_mean if state_mean is not None else np.zeros(ri.Z.shape[1])
            mu[si] = ri.Z @ xm + ri.m
            y[si] = ri.y
            for j in range(i, len(records)):
                rj = records[j]
                tau = rj.t - ri.t
                Ct = cache.get(tau)
                if Ct is None:
                    Ct = cache[tau] = np.asarray(cov(tau), dtype=float)
                blk = ri.Z @ Ct @ rj.Z.T
                sj = slice(offs[j], offs[j + 1])
                if i == j:
                    C[si, si] = matfun.symmetrize(blk) + ri.H
                else:
                    C[si, sj] = blk
                    C[sj, si] = blk.T
    try:
        cf = scipy.linalg.cho_factor(C, lower=True)
    except np.linalg.LinAlgError:
        raise NotPsd("joint covariance is not positive definite; add measurement noise") from None
    r = y - mu
    quad = r @ scipy.linalg.cho_solve(cf, r)
    logdet = 2.0 * np.sum(np.log(np.diag(cf[0])))
    return float(-0.5 * (quad + logdet + total * LOG_2PI))


def _dense_lti_blocks(sys, Sigma, state_mean, records, offs):
    """Vectorised joint covariance for an LTI system: one stacked expm over
    all record-pair lags, observation matrices zero-padded to a common size."""
    R, n = len(records), sys.n
    dmax = max(r.d for r in records)
    Zp = np.zeros((R, dmax, n))
    valid = np.zeros((R, dmax), dtype=bool)
    for i, r in enumerate(records):
        Zp[i, : r.d] = r.Z
        valid[i, : r.d] = True
    t = np.array([r.t for r in records])
    iu = np.triu_indices(R)
    lags = t[iu[1]] - t[iu[0]]
    w, V = np.linalg.eig(sys.A.T)
    if np.linalg.cond(V) < 1e4:
        Vinv = np.linalg.inv(V)
        Ct = Sigma @ np.einsum("ab,pb,bc->pac", V, np.exp(lags[:, None] * w[None, :]), Vinv).real
    else:
        Ct = Sigma @ scipy.linalg.expm(sys.A.T[None] * lags[:, None, None])
    blocks = np.einsum("pab,pbc,pdc->pad", Zp[iu[0]], Ct, Zp[iu[1]])
    full = np.zeros((R, R, dmax, dmax))
    full[iu] = blocks
    full[iu[1], iu[0]] = np.swapaxes(blocks, 1, 2)
    C = full.transpose(0, 2, 1, 3).reshape(R * dmax, R * dmax)[np.ix_(valid.ravel(), valid.ravel())]
    for i, r in enumerate(records):
        si = slice(offs[i], offs[i + 1])
        C[si, si] = matfun.symmetrize(C[si, si]) + r.H
    mu = np.concatenate([r.Z @ state_mean + r.m for r in records])
    y = np.concatenate([r.y for r in records])
    return C, mu, y


# ---------------------------------------------------------------------------
# Array-level fast path
# ---------------------------------------------------------------------------


@dataclass
class PackedRecords:
    """Records flattened for the compiled filter.

    Observation matrices are grouped into patterns; ``pat_idx[i]`` selects
    the pattern of record ``i``. Intervals are deduplicated into ``taus``.
    """

    times: np.ndarray
    Y: np.ndarray  # (N, d_max), padded
    pat_idx: np.ndarray
    dims: np.ndarray  # per pattern
    taus: np.ndarray
    tau_idx: np.ndarray  # -1 for the first record

    @classmethod
    def build(cls, times, Y, pat_idx, dims) -> "PackedRecords":
        times = np.asarray(times, dtype=float)
        if np.any(np.diff(times) <= 0):
            raise InvalidTimes("times must be strictly increasing")
        gaps = np.diff(times)
        taus, inv = np.unique(gaps, return_inverse=True)
        tau_idx = np.concatenate([[-1], inv]).astype(np.int64)
        return cls(times, np.ascontiguousarray(Y, dtype=float), np.asarray(pat_idx, dtype=np.int64),
                   np.asarray(dims, dtype=np.int64), taus, tau_idx)

    def __len__(self):
        return len(self.times)

    def decay(self, forget: float) -> np.ndarray:
        out = np.ones(len(self.times))
        if forget:
            out[1:] = np.exp(-forget * np.diff(self.times))
        return out


def pack_records(records: Sequence[ObservationRecord]):
    """Pack explicit records; returns ``(packed, Zs, ms, Hs, dZs, dms, dHs)``.

    Records sharing the same matrix objects share a pattern.
    """
    keys: dict[tuple, int] = {}
    pats: list[ObservationRecord] = []
    pat_idx = np.empty(len(records), dtype=np.int64)
    for i, r in enumerate(records):
        key = (id(r.Z), id(r.m), id(r.H), id(r.dZ), id(r.dm), id(r.dH))
        k = keys.get(key)
        if k is None:
            k = keys[key] = len(pats)
            pats.append(r)
        pat_idx[i] = k
    dmax = max((r.d for r in records), default=1)
    n = records[0].Z.shape[1] if records else 0
    Y = np.zeros((len(records), dmax))
    for i, r in enumerate(records):
        Y[i, : r.d] = r.y
    nk = len(pats)
    dims = np.array([r.d for r in pats], dtype=np.int64)
    Zs = np.zeros((nk, dmax, n))
    ms = np.zeros((nk, dmax))
    Hs = np.zeros((nk, dmax, dmax))
    nP = next((len(a) for r in pats for a in (r.dZ, r.dm, r.dH) if a is not None), 0)
    dZs = np.zeros((nk, nP, dmax, n))
    dms = np.zeros((nk, nP, dmax))
    dHs = np.zeros((nk, nP, dmax, dmax))
    for k, r in enumerate(pats):
        d = r.d
        Zs[k, :d] = r.Z
        ms[k, :d] = r.m
        Hs[k, :d, :d] = r.H
        if r.dZ is not None:
            dZs[k, :, :d] = r.dZ
        if r.dm is not None:
            dms[k, :, :d] = r.dm
        if r.dH is not None:
            dHs[k, :, :d, :d] = r.dH
    packed = PackedRecords.build([r.t for r in records], Y, pat_idx, dims)
    return packed, Zs, ms, Hs, dZs, dms, dHs


def filter_packed(sys: LtiSystem, packed: PackedRecords, Zs, ms, Hs, dsys: SystemGradient | None = None,
                  dZs=None, dms=None, dHs=None, forget: float = 0.0, return_eps: bool = False):
    """Run the compiled filter from the stationary prior.

    Returns a FilterState (with ``dL``/``dL_disc`` when ``dsys`` is given),
    plus the per-record evidence gains if ``return_eps``.
    """
    from . import _fastfilter

    n = sys.n
    nk, dmax = ms.shape
    with_grad = dsys is not None
    nP = dsys.n_params if with_grad else 0
    st0 = init_stationary(sys, dsys)
    U = len(packed.taus)
    Phis = np.empty((U, n, n))
    Gs = np.empty((U, n, n))
    dPhis = np.zeros((U, nP, n, n))
    dGs = np.zeros((U, nP, n, n))
    for u, tau in enumerate(packed.taus):
        if with_grad:
            Phis[u], Gs[u], dPhis[u], dGs[u] = matfun.van_loan_derivatives(sys.A, sys.K, tau, dsys.dA, dsys.dK)
        else:
            Phis[u], Gs[u] = matfun.van_loan_discretize(sys.A, sys.K, tau)
    xbar = mean_response(sys)
    if with_grad:
        dxbar = _mean_derivative(sys, dsys, xbar)
        dx0, dP0 = st0.dx, st0.dP
        if dZs is None:
            dZs = np.zeros((nk, nP, dmax, n))
        if dms is None:
            dms = np.zeros((nk, nP, dmax))
        if dHs is None:
            dHs = np.zeros((nk, nP, dmax, dmax))
        if not (dZs.shape == (nk, nP, dmax, n) and dms.shape == (nk, nP, dmax) and dHs.shape == (nk, nP, dmax, dmax)):
            raise ValueError("observation derivative arrays do not match the parameter count")
    else:
        dxbar = np.zeros((0, n))
        dx0 = np.zeros((0, n))
        dP0 = np.zeros((0, n, n))
        dZs = np.zeros((nk, 0, dmax, n))
        dms = np.zeros((nk, 0, dmax))
        dHs = np.zeros((nk, 0, dmax, dmax))
    eps = np.zeros(len(packed))
    f = lambda a: np.ascontiguousarray(a, dtype=float)  # noqa: E731
    status, L, Ld, dL, dLd, x, P, dx, dP = _fastfilter.filter_kernel(
        f(st0.x), f(st0.P), f(dx0), f(dP0), f(xbar), f(dxbar),
        Phis, Gs, dPhis, dGs, packed.tau_idx, packed.decay(forget),
        f(Zs), f(ms), f(Hs), f(dZs), f(dms), f(dHs), packed.dims, packed.pat_idx, packed.Y,
        with_grad, eps,
    )
    if status != 0:
        raise SingularInnovation("innovation covariance is singular after jitter")
    t_last = float(packed.times[-1]) if len(packed) else None
    st = FilterState(t_last, x, P, float(L), float(Ld), n_records=len(packed))
    if with_grad:
        st.dx, st.dP, st.dL, st.dL_disc = dx, dP, dL, dLd
    if return_eps:
        return st, eps
    return st


def run_filter_fast(sys: LtiSystem, records: Sequence[ObservationRecord], dsys: SystemGradient | None = None,
                    forget: float = 0.0) -> FilterState:
    """Compiled equivalent of :func:`run_filter` started from the stationary prior."""
    if len(records) == 0:
        return init_stationary(sys, dsys)
    packed, Zs, ms, Hs, dZs, dms, dHs = pack_records(records)
    if dsys is None:
        return filter_packed(sys, packed, Zs, ms, Hs, forget=forget)
    if dZs.shape[1] == 0:
        dZs = dms = dHs = None
    return filter_packed(sys, packed, Zs, ms, Hs, dsys, dZs, dms, dHs, forget=forget)
