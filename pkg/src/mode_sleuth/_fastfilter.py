"""Compiled batch filter used on the fitting hot path.

Computes exactly what :func:`mode_sleuth.kalman.run_filter` computes with
sensitivities, over precomputed per-interval discretisations and
per-pattern observation matrices. Kept numerically identical in structure
to the reference implementation; ``tests/test_kalman.py`` checks the two
agree.
"""

from __future__ import annotations

import math

import numpy as np

try:
    import numba

    _njit = numba.njit(cache=True, fastmath=False, nogil=True)
    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    HAVE_NUMBA = False

    def _njit(f):
        return f


LOG_2PI = math.log(2 * math.pi)


@_njit
def _mm(A, B):
    n, k = A.shape
    m = B.shape[1]
    C = np.zeros((n, m))
    for i in range(n):
        for l in range(k):
            a = A[i, l]
            if a != 0.0:
                for j in range(m):
                    C[i, j] += a * B[l, j]
    return C


@_njit
def _mmT(A, B):
    # A @ B.T
    n, k = A.shape
    m = B.shape[0]
    C = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            s = 0.0
            for l in range(k):
                s += A[i, l] * B[j, l]
            C[i, j] = s
    return C


@_njit
def _mv(A, x):
    n, k = A.shape
    out = np.zeros(n)
    for i in range(n):
        s = 0.0
        for l in range(k):
            s += A[i, l] * x[l]
        out[i] = s
    return out


@_njit
def _sym(A):
    n = A.shape[0]
    for i in range(n):
        for j in range(i + 1, n):
            s = 0.5 * (A[i, j] + A[j, i])
            A[i, j] = s
            A[j, i] = s


@_njit
def _chol(F):
    d = F.shape[0]
    L = np.zeros((d, d))
    for j in range(d):
        s = F[j, j]
        for k in range(j):
            s -= L[j, k] * L[j, k]
        if not s > 0.0:
            return L, False
        L[j, j] = math.sqrt(s)
        for i in range(j + 1, d):
            s2 = F[i, j]
            for k in range(j):
                s2 -= L[i, k] * L[j, k]
            L[i, j] = s2 / L[j, j]
    return L, True


@_njit
def _chol_inv(L):
    d = L.shape[0]
    # inverse of L (lower), then F^{-1} = L^{-T} L^{-1}
    Li = np.zeros((d, d))
    for j in range(d):
        Li[j, j] = 1.0 / L[j, j]
        for i in range(j + 1, d):
            s = 0.0
            for k in range(j, i):
                s -= L[i, k] * Li[k, j]
            Li[i, j] = s / L[i, i]
    Finv = np.zeros((d, d))
    for i in range(d):
        for j in range(d):
            s = 0.0
            for k in range(max(i, j), d):
                s += Li[k, i] * Li[k, j]
            Finv[i, j] = s
    return Finv


@_njit
def _mm_to(A, B, C):
    # C = A @ B
    n, k = A.shape
    m = B.shape[1]
    for i in range(n):
        for j in range(m):
            s = 0.0
            for l in range(k):
                s += A[i, l] * B[l, j]
            C[i, j] = s


@_njit
def _mmT_to(A, B, C):
    # C = A @ B.T
    n, k = A.shape
    m = B.shape[0]
    for i in range(n):
        for j in range(m):
            s = 0.0
            for l in range(k):
                s += A[i, l] * B[j, l]
            C[i, j] = s


@_njit
def filter_kernel(x0, P0, dx0, dP0, xbar, dxbar,
                  Phis, Gs, dPhis, dGs, tau_idx, decay,
                  Zs, ms, Hs, dZs, dms, dHs, dims, pat_idx, Y,
                  with_grad, eps_out):
    """Returns ``(status, L, L_disc, dL, dL_disc, x, P, dx, dP)``.

    status: 0 ok, 1 singular innovation (after jitter).
    """
    n = x0.shape[0]
    nP = dx0.shape[0]
    dmax = ms.shape[1]
    x = x0.copy()
    P = P0.copy()
    dx = dx0.copy()
    dP = dP0.copy()
    L = 0.0
    Ld = 0.0
    dL = np.zeros(nP)
    dLd = np.zeros(nP)
    N = Y.shape[0]
    # workspaces
    xp = np.zeros(n)
    Pp = np.zeros((n, n))
    dxp = np.zeros((nP, n))
    dPp = np.zeros((nP, n, n))
    PhiP = np.zeros((n, n))
    W1 = np.zeros((n, n))
    W2 = np.zeros((n, n))
    PZt_b = np.zeros((n, dmax))
    F_b = np.zeros((dmax, dmax))
    gain_b = np.zeros((n, dmax))
    dv_b = np.zeros(dmax)
    dF_b = np.zeros((dmax, dmax))
    ZdP_b = np.zeros((dmax, n))
    dPZt_b = np.zeros((n, dmax))
    dgain_b = np.zeros((n, dmax))
    GdF_b = np.zeros((n, dmax))
    T_b = np.zeros((n, n))
    dev = np.zeros(n)
    for i in range(N):
        ti = tau_idx[i]
        if ti >= 0:
            Phi = Phis[ti]
            for r in range(n):
                dev[r] = x[r] - xbar[r]
            for r in range(n):
                s = xbar[r]
                for c in range(n):
                    s += Phi[r, c] * dev[c]
                xp[r] = s
            _mm_to(Phi, P, PhiP)
            _mmT_to(PhiP, Phi, Pp)
            G = Gs[ti]
            for r in range(n):
                for c in range(n):
                    Pp[r, c] += G[r, c]
            _sym(Pp)
            if with_grad:
                for p in range(nP):
                    dPhi = dPhis[ti, p]
                    for r in range(n):
                        s = dxbar[p, r]
                        for c in range(n):
                            s += dPhi[r, c] * dev[c] + Phi[r, c] * (dx[p, c] - dxbar[p, c])
                        dxp[p, r] = s
                    # cross = dPhi @ PhiP.T ; W2 = Phi dP Phi^T
                    _mmT_to(dPhi, PhiP, W1)
                    _mm_to(Phi, dP[p], T_b)
                    _mmT_to(T_b, Phi, W2)
                    dG = dGs[ti, p]
                    for r in range(n):
                        for c in range(n):
                            dPp[p, r, c] = W1[r, c] + W1[c, r] + W2[r, c] + dG[r, c]
                    _sym(dPp[p])
        else:
            xp[:] = x
            Pp[:, :] = P
            if with_grad:
                dxp[:, :] = dx
                dPp[:, :, :] = dP
        k = pat_idx[i]
        d = dims[k]
        Z = Zs[k, :d]
        m = ms[k, :d]
        H = Hs[k, :d, :d]
        v = np.empty(d)
        for r in range(d):
            s = Y[i, r] - m[r]
            for c in range(n):
                s -= Z[r, c] * xp[c]
            v[r] = s
        PZt = PZt_b[:, :d]
        _mmT_to(Pp, Z, PZt)
        F = F_b[:d, :d]
        _mm_to(Z, PZt, F)
        for r in range(d):
            for c in range(d):
                F[r, c] += H[r, c]
        _sym(F)
        Lc, ok = _chol(F)
        if not ok:
            tr = 0.0
            for j in range(d):
                tr += F[j, j]
            jit = 1e-12 * tr / d
            if not jit > 0.0:
                return 1, L, Ld, dL, dLd, x, P, dx, dP
            for j in range(d):
                F[j, j] += jit
            Lc, ok = _chol(F)
            if not ok:
                return 1, L, Ld, dL, dLd, x, P, dx, dP
        Finv = _chol_inv(Lc)
        a = _mv(Finv, v)
        gain = gain_b[:, :d]
        _mm_to(PZt, Finv, gain)
        for r in range(n):
            s = xp[r]
            for c in range(d):
                s += gain[r, c] * v[c]
            x[r] = s
        # Joseph form
        IKZ = W1
        _mm_to(gain, Z, IKZ)
        for r in range(n):
            for c in range(n):
                IKZ[r, c] = -IKZ[r, c]
            IKZ[r, r] += 1.0
        _mm_to(IKZ, Pp, T_b)
        _mmT_to(T_b, IKZ, P)
        GH = GdF_b[:, :d]
        _mm_to(gain, H, GH)
        _mmT_to(GH, gain, W2)
        for r in range(n):
            for c in range(n):
                P[r, c] += W2[r, c]
        _sym(P)
        logdet = 0.0
        quad = 0.0
        for j in range(d):
            logdet += 2.0 * math.log(Lc[j, j])
            quad += v[j] * a[j]
        eps = -0.5 * (quad + logdet + d * LOG_2PI)
        eps_out[i] = eps
        dec = decay[i]
        L += eps
        Ld = dec * Ld + eps
        if with_grad:
            dv = dv_b[:d]
            dF = dF_b[:d, :d]
            ZdP = ZdP_b[:d]
            dPZt = dPZt_b[:, :d]
            dgain = dgain_b[:, :d]
            GdF = GdF_b[:, :d]
            for p in range(nP):
                dZ = dZs[k, p, :d]
                dm = dms[k, p, :d]
                dHk = dHs[k, p, :d, :d]
                for r in range(d):
                    s = -dm[r]
                    for c in range(n):
                        s -= dZ[r, c] * xp[c] + Z[r, c] * dxp[p, c]
                    dv[r] = s
                _mm_to(Z, dPp[p], ZdP)
                # dF = ZdP Z^T + dZ PZt + (dZ PZt)^T + dH
                for r in range(d):
                    for c in range(d):
                        s = dHk[r, c]
                        for l in range(n):
                            s += ZdP[r, l] * Z[c, l] + dZ[r, l] * PZt[l, c] + dZ[c, l] * PZt[l, r]
                        dF[r, c] = s
                de = 0.0
                for r in range(d):
                    Fa = 0.0
                    for c in range(d):
                        Fa += dF[r, c] * a[c]
                        de -= 0.5 * Finv[r, c] * dF[c, r]
                    de += -dv[r] * a[r] + 0.5 * a[r] * Fa
                # dPZt = dP Z^T + P dZ^T, minus gain dF
                for r in range(n):
                    for c in range(d):
                        s = 0.0
                        for l in range(n):
                            s += dPp[p, r, l] * Z[c, l] + Pp[r, l] * dZ[c, l]
                        for l in range(d):
                            s -= gain[r, l] * dF[l, c]
                        dPZt[r, c] = s
                _mm_to(dPZt, Finv, dgain)
                for r in range(n):
                    s = dxp[p, r]
                    for c in range(d):
                        s += dgain[r, c] * v[c] + gain[r, c] * dv[c]
                    dx[p, r] = s
                # dP = dPp - dgain (Z Pp) - (...)^T - gain dF gain^T
                _mm_to(gain, dF, GdF)
                for r in range(n):
                    for c in range(r, n):
                        s = dPp[p, r, c]
                        for l in range(d):
                            s -= dgain[r, l] * PZt[c, l] + dgain[c, l] * PZt[r, l] + GdF[r, l] * gain[c, l]
                        dP[p, r, c] = s
                        dP[p, c, r] = s
                dL[p] += de
                dLd[p] = dec * dLd[p] + de
    return 0, L, Ld, dL, dLd, x, P, dx, dP
