"""Compiled filtering kernels for small state dimensions.

All per-timestep matrix inputs are 3-D with a leading axis of length 1
(time-invariant) or T. Offsets and observations are 2-D (T, k). A
pseudo-measurement channel of dimension 0 means "no channel".

Status codes returned by the covariance pass:
0 ok, 1 singular measurement innovation, 2 singular pseudo innovation,
3 singular predicted covariance in the backward pass.
"""

import numpy as np
from numba import njit

_TINY = 1e-300


@njit(cache=True)
def _idx(arr, t):
    return t if arr.shape[0] > 1 else 0


@njit(cache=True)
def _chol(S, L):
    """Lower Cholesky factor of S into L; False if S is not numerically PD."""
    k = S.shape[0]
    scale = 0.0
    for i in range(k):
        scale = max(scale, abs(S[i, i]))
    for j in range(k):
        s = S[j, j]
        for p in range(j):
            s -= L[j, p] * L[j, p]
        if not (s > 1e-14 * scale) or s < _TINY:
            return False
        L[j, j] = np.sqrt(s)
        for i in range(j + 1, k):
            s = S[i, j]
            for p in range(j):
                s -= L[i, p] * L[j, p]
            L[i, j] = s / L[j, j]
        for i in range(j):
            L[i, j] = 0.0
    return True


@njit(cache=True)
def _chol_solve(L, B, X):
    """Solve (L L^T) X = B column by column."""
    k, m = B.shape
    for c in range(m):
        for i in range(k):
            s = B[i, c]
            for p in range(i):
                s -= L[i, p] * X[p, c]
            X[i, c] = s / L[i, i]
        for i in range(k - 1, -1, -1):
            s = X[i, c]
            for p in range(i + 1, k):
                s -= L[p, i] * X[p, c]
            X[i, c] = s / L[i, i]


@njit(cache=True)
def _symmetrize(P):
    n = P.shape[0]
    for i in range(n):
        for j in range(i + 1, n):
            v = 0.5 * (P[i, j] + P[j, i])
            P[i, j] = v
            P[j, i] = v


@njit(cache=True)
def _update_cov(Pm, C, V, K, S, P):
    """Gain K, innovation covariance S and posterior P for one channel."""
    k = C.shape[0]
    n = Pm.shape[0]
    if k == 0:
        P[:, :] = Pm
        return True
    CP = C @ Pm
    S[:, :] = CP @ C.T + V
    _symmetrize(S)
    L = np.zeros((k, k))
    if not _chol(S, L):
        return False
    Kt = np.empty((k, n))
    _chol_solve(L, CP, Kt)
    K[:, :] = Kt.T
    P[:, :] = Pm - K @ CP
    _symmetrize(P)
    return True


@njit(cache=True)
def covariance_pass(T, A, Q, H, R, Th, Sg, P1, Ky, Kz, Sy, Sz, G, Pp, Pf):
    """Fill gains and covariances; returns (status, t)."""
    n = P1.shape[0]
    ny = H.shape[1]
    p = Th.shape[1]
    Pm = P1.copy()
    Py = np.empty((n, n))
    P = np.empty((n, n))
    for t in range(T):
        if t > 0:
            At = A[_idx(A, t)]
            Pm = At @ P @ At.T + Q[_idx(Q, t)]
            _symmetrize(Pm)
        Pp[t] = Pm
        if not _update_cov(Pm, H[_idx(H, t)], R[_idx(R, t)], Ky[t], Sy[t], Py):
            return 1, t
        if p > 0:
            if not _update_cov(Py, Th[_idx(Th, t)], Sg[_idx(Sg, t)], Kz[t], Sz[t], P):
                return 2, t
        else:
            P[:, :] = Py
        Pf[t] = P
    L = np.zeros((n, n))
    X = np.empty((n, n))
    for t in range(T - 1):
        if not _chol(Pp[t + 1], L):
            return 3, t + 1
        # solve Pm_{t+1} G^T = A_{t+1} P_t
        _chol_solve(L, A[_idx(A, t + 1)] @ Pf[t], X)
        G[t] = X.T
    return 0, 0


@njit(cache=True)
def smoothed_covariances(Pf, Pp, G, Ps):
    T = Pf.shape[0]
    Ps[T - 1] = Pf[T - 1]
    for t in range(T - 2, -1, -1):
        D = Ps[t + 1] - Pp[t + 1]
        Ps[t] = Pf[t] + G[t] @ D @ G[t].T
        _symmetrize(Ps[t])


@njit(cache=True)
def means_pass(A, b, H, c, y, Th, De, Ky, Kz, G, m1, ms):
    """Forward filter and backward smoother for the means, gains given."""
    T = y.shape[0]
    n = m1.shape[0]
    p = Th.shape[1]
    mp = np.empty((T, n))
    mf = np.empty((T, n))
    m = m1.copy()
    for t in range(T):
        if t > 0:
            m = A[_idx(A, t)] @ m + b[t]
        mp[t] = m
        m = m + Ky[t] @ (y[t] - c[t] - H[_idx(H, t)] @ m)
        if p > 0:
            m = m + Kz[t] @ (De[t] - Th[_idx(Th, t)] @ m)
        mf[t] = m
    ms[T - 1] = mf[T - 1]
    for t in range(T - 2, -1, -1):
        ms[t] = mf[t] + G[t] @ (ms[t + 1] - mp[t + 1])
