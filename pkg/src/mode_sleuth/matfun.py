"""Dense small-matrix functions: exponentials, Lyapunov/Sylvester solves,
psd factorisation and exact noise integrals."""

from __future__ import annotations

import numpy as np
import scipy.linalg

from .errors import InvalidInput, NotPsd, SpectrumOverlap, UnstableSystem

__all__ = [
    "expm",
    "is_stable",
    "solve_lyapunov",
    "solve_sylvester",
    "van_loan_discretize",
    "van_loan_derivatives",
    "cholesky_psd",
    "psd_sqrt",
    "symmetrize",
]


def _as_square(A, name="A") -> np.ndarray:
    A = np.atleast_2d(np.asarray(A, dtype=float))
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise InvalidInput(f"{name} must be square, got shape {A.shape}")
    if not np.all(np.isfinite(A)):
        raise InvalidInput(f"{name} has non-finite entries")
    return A


def symmetrize(S: np.ndarray) -> np.ndarray:
    return 0.5 * (S + np.swapaxes(S, -1, -2))


def _check_psd(S: np.ndarray, tol: float, name: str) -> None:
    if S.size == 0:
        return
    if not np.allclose(S, S.T, rtol=1e-10, atol=1e-12 * max(1.0, np.abs(S).max())):
        raise NotPsd(f"{name} is not symmetric")
    w = np.linalg.eigvalsh(symmetrize(S))
    scale = max(np.trace(S), 0.0)
    if w[0] < -tol * scale or (scale == 0.0 and w[0] < -tol):
        raise NotPsd(f"{name} has eigenvalue {w[0]:.3e} (trace {scale:.3e})")


def expm(A, t: float = 1.0) -> np.ndarray:
    """Matrix exponential ``exp(A t)`` (scaling and squaring, Pade)."""
    A = _as_square(A)
    if not np.isfinite(t):
        raise InvalidInput("t must be finite")
    if A.shape[0] == 0 or t == 0.0:
        return np.eye(A.shape[0])
    return scipy.linalg.expm(A * t)


def is_stable(A) -> tuple[bool, float]:
    """Return ``(stable, margin)`` with margin = -max Re(eig A)."""
    A = _as_square(A)
    if A.shape[0] == 0:
        return True, np.inf
    margin = -float(np.max(np.linalg.eigvals(A).real))
    return margin > 0.0, margin


def solve_lyapunov(A, K, check_psd: bool = True) -> np.ndarray:
    """Solve ``A S + S A^T = -K`` for symmetric S.

    Raises UnstableSystem unless every eigenvalue of A lies in the open left
    half plane, and NotPsd when K is not symmetric positive semi-definite
    (skipped with ``check_psd=False`` for indefinite symmetric forcing).
    """
    A = _as_square(A)
    K = _as_square(K, "K")
    if A.shape != K.shape:
        raise InvalidInput(f"shape mismatch {A.shape} vs {K.shape}")
    if A.shape[0] == 0:
        return np.zeros((0, 0))
    stable, margin = is_stable(A)
    if not stable:
        raise UnstableSystem(f"drift has eigenvalue with real part {-margin:.3e}")
    if check_psd:
        _check_psd(K, 1e-10, "K")
    S = scipy.linalg.solve_continuous_lyapunov(A, -symmetrize(K))
    return symmetrize(S)


def solve_sylvester(A, Jm, C) -> np.ndarray:
    """Solve ``A E + E Jm = C``.

    The solution is unique when no eigenvalue of A is the negative of an
    eigenvalue of Jm; near-coincidences below ``1e-8 (|A| + |Jm|)`` raise
    SpectrumOverlap.
    """
    A = _as_square(A)
    Jm = _as_square(Jm, "Jm")
    C = np.atleast_2d(np.asarray(C, dtype=float))
    if C.shape != (A.shape[0], Jm.shape[0]):
        raise InvalidInput(f"C has shape {C.shape}, expected {(A.shape[0], Jm.shape[0])}")
    ea = np.linalg.eigvals(A)
    ej = np.linalg.eigvals(Jm)
    gap = np.min(np.abs(ea[:, None] + ej[None, :]))
    scale = np.linalg.norm(A) + np.linalg.norm(Jm)
    if gap <= 1e-8 * scale:
        raise SpectrumOverlap(f"eigenvalue sums come within {gap:.3e} of zero")
    return scipy.linalg.solve_sylvester(A, Jm, C)


def _doubling_count(A: np.ndarray, tau: float) -> int:
    norm = np.linalg.norm(A, 1) * tau
    if norm <= 0.5:
        return 0
    return int(np.ceil(np.log2(norm / 0.5)))


def van_loan_discretize(A, K, tau: float) -> tuple[np.ndarray, np.ndarray]:
    """Exact transition ``Phi = exp(A tau)`` and noise integral
    ``G = int_0^tau exp(A s) K exp(A^T s) ds``.

    The block matrix ``[[A, K], [0, -A^T]]`` is exponentiated over a short
    sub-interval and the result is composed by repeated doubling, which
    avoids forming ``exp(-A^T tau)`` for long intervals.
    """
    A = _as_square(A)
    K = _as_square(K, "K")
    n = A.shape[0]
    if not np.isfinite(tau) or tau < 0:
        raise InvalidInput(f"tau must be finite and >= 0, got {tau}")
    if tau == 0.0 or n == 0:
        return np.eye(n), np.zeros((n, n))
    s = _doubling_count(A, tau)
    h = tau / 2.0**s
    V = np.zeros((2 * n, 2 * n))
    V[:n, :n] = A
    V[:n, n:] = K
    V[n:, n:] = -A.T
    E = scipy.linalg.expm(V * h)
    Phi = E[:n, :n]
    G = symmetrize(E[:n, n:] @ Phi.T)
    for _ in range(s):
        G = symmetrize(Phi @ G @ Phi.T + G)
        Phi = Phi @ Phi
    return Phi, G


def van_loan_derivatives(A, K, tau, dA, dK):
    """Van Loan discretisation together with its parameter derivatives.

    ``dA`` and ``dK`` have shape ``(P, n, n)``; returns
    ``(Phi, G, dPhi, dG)`` with ``dPhi``/``dG`` of shape ``(P, n, n)``.
    Derivatives of the sub-interval exponential are exact Frechet
    derivatives; the doubling steps are differentiated by the product rule.
    """
    A = _as_square(A)
    K = _as_square(K, "K")
    n = A.shape[0]
    dA = np.asarray(dA, dtype=float)
    P = dA.shape[0] if dA.ndim == 3 else dA.size // max(n * n, 1)
    dA = dA.reshape(P, n, n)
    dK = np.asarray(dK, dtype=float).reshape(P, n, n)
    if tau < 0:
        raise InvalidInput(f"tau must be >= 0, got {tau}")
    if tau == 0.0 or n == 0:
        return np.eye(n), np.zeros((n, n)), np.zeros((P, n, n)), np.zeros((P, n, n))
    s = _doubling_count(A, tau)
    h = tau / 2.0**s
    V = np.zeros((2 * n, 2 * n))
    V[:n, :n] = A
    V[:n, n:] = K
    V[n:, n:] = -A.T
    V *= h
    dPhi = np.empty((P, n, n))
    dX = np.empty((P, n, n))
    E = None
    for p in range(P):
        if not (dA[p].any() or dK[p].any()):
            dPhi[p] = 0.0
            dX[p] = 0.0
            continue
        dV = np.zeros((2 * n, 2 * n))
        dV[:n, :n] = dA[p]
        dV[:n, n:] = dK[p]
        dV[n:, n:] = -dA[p].T
        E, dE = scipy.linalg.expm_frechet(V, dV * h)
        dPhi[p] = dE[:n, :n]
        dX[p] = dE[:n, n:]
    if E is None:
        E = scipy.linalg.expm(V)
    Phi = E[:n, :n]
    X = E[:n, n:]
    G = symmetrize(X @ Phi.T)
    dG = symmetrize(dX @ Phi.T + X @ np.swapaxes(dPhi, 1, 2))
    for _ in range(s):
        PhiT = Phi.T
        GPhiT = G @ PhiT
        cross = dPhi @ GPhiT
        dG = symmetrize(cross + np.swapaxes(cross, 1, 2) + Phi @ dG @ PhiT + dG)
        G = symmetrize(Phi @ GPhiT + G)
        dPhi = dPhi @ Phi + Phi @ dPhi
        Phi = Phi @ Phi
    return Phi, G, dPhi, dG


def cholesky_psd(S, tol: float = 1e-10) -> np.ndarray:
    """Lower-triangular L with nonnegative diagonal and ``L L^T = S``.

    Semi-definite inputs are handled by zeroing columns whose pivot falls
    below ``tol * trace(S)``. Raises NotPsd when the smallest eigenvalue of S
    is below ``-tol * trace(S)``.
    """
    S = _as_square(S, "S")
    n = S.shape[0]
    if n == 0:
        return np.zeros((0, 0))
    if not np.allclose(S, S.T, rtol=1e-10, atol=1e-14 * max(1.0, np.abs(S).max())):
        raise NotPsd("S is not symmetric")
    S = symmetrize(S)
    scale = max(np.trace(S), 0.0)
    w = np.linalg.eigvalsh(S)
    if w[0] < -tol * max(scale, np.finfo(float).tiny):
        raise NotPsd(f"S has eigenvalue {w[0]:.3e} (trace {scale:.3e})")
    try:
        return np.linalg.cholesky(S)
    except np.linalg.LinAlgError:
        pass
    L = np.zeros_like(S)
    floor = tol * scale
    for j in range(n):
        d = S[j, j] - L[j, :j] @ L[j, :j]
        if d <= floor:
            continue
        L[j, j] = np.sqrt(d)
        L[j + 1 :, j] = (S[j + 1 :, j] - L[j + 1 :, :j] @ L[j, :j]) / L[j, j]
    return L


def psd_sqrt(S, tol: float = 1e-12) -> np.ndarray:
    """Factor R with ``R R^T = S``, clamping tiny negative eigenvalues.

    Eigenvalues in ``[-tol trace, 0)`` are set to zero; anything more
    negative raises NotPsd.
    """
    S = symmetrize(np.atleast_2d(np.asarray(S, dtype=float)))
    if S.size == 0:
        return S.copy()
    w, V = np.linalg.eigh(S)
    scale = max(np.trace(S), 0.0)
    if w[0] < -tol * scale and w[0] < -1e-300:
        raise NotPsd(f"eigenvalue {w[0]:.3e} below tolerance")
    return V * np.sqrt(np.clip(w, 0.0, None))
