"""Compiled RK4 passes for the coupled covariance / gain equations.

These mirror ``numerics.integrate_ode`` step for step with the right-hand
sides written out by hand; the pure-Python path in ``moments`` and
``riccati`` is kept as the reference implementation.

Gain blocks are passed as a flat index array with offsets: block ``b``
covers ``idx_flat[offsets[b]:offsets[b+1]]`` and carries weight ``Ms[b]``.

Status codes: 0 ok, 1 non-finite value, 2 singular covariance block.

All scratch space lives in one ``(N_SCRATCH, d, d)`` workspace allocated per
pass; the right-hand sides allocate nothing.
"""

import numpy as np
from numba import njit

OK, NONFINITE, SINGULAR = 0, 1, 2
N_SCRATCH = 10  # Acl, K, T1, T2, W, Sbb, Sb, X, L, Y
JITTER = np.array([0.0, 1e-9, 1e-7, 1e-5])  # relative diagonal loads tried in turn


@njit(cache=True)
def _mm(a, b, out):
    n, m = a.shape
    p = b.shape[1]
    for i in range(n):
        for j in range(p):
            s = 0.0
            for k in range(m):
                s += a[i, k] * b[k, j]
            out[i, j] = s


@njit(cache=True)
def _mtm(a, b, out):
    # out = a.T @ b
    m, n = a.shape
    p = b.shape[1]
    for i in range(n):
        for j in range(p):
            s = 0.0
            for k in range(m):
                s += a[k, i] * b[k, j]
            out[i, j] = s


@njit(cache=True)
def _cholesky(L):
    n = L.shape[0]
    for j in range(n):
        s = L[j, j]
        for k in range(j):
            s -= L[j, k] * L[j, k]
        if not s > 0.0:
            return False
        L[j, j] = np.sqrt(s)
        for i in range(j + 1, n):
            s = L[i, j]
            for k in range(j):
                s -= L[i, k] * L[j, k]
            L[i, j] = s / L[j, j]
    return True


@njit(cache=True)
def spd_solve(S, rhs, out, L):
    n = S.shape[0]
    for i in range(n):
        for j in range(n):
            if not np.isfinite(S[i, j]):
                return False
    scale = 0.0
    for i in range(n):
        scale += S[i, i]
    scale /= n
    for attempt in range(JITTER.size):
        eps = JITTER[attempt]
        if attempt > 0 and not scale > 0.0:
            return False
        for i in range(n):
            for j in range(n):
                L[i, j] = S[i, j]
            L[i, i] += eps * scale
        if _cholesky(L):
            p = rhs.shape[1]
            for c in range(p):
                for i in range(n):
                    s = rhs[i, c]
                    for k in range(i):
                        s -= L[i, k] * out[k, c]
                    out[i, c] = s / L[i, i]
                for i in range(n - 1, -1, -1):
                    s = out[i, c]
                    for k in range(i + 1, n):
                        s -= L[k, i] * out[k, c]
                    out[i, c] = s / L[i, i]
            return True
    return False


@njit(cache=True)
def gain(S, idx, K, ws):
    """Fill ``K`` with the conditional-mean gain of the index set ``idx``."""
    d = S.shape[0]
    m = idx.size
    K[:, :] = 0.0
    if m == d:
        for i in range(d):
            K[i, i] = 1.0
        return True
    Sbb = ws[5, :m, :m]
    Sb = ws[6, :m, :]
    X = ws[7, :m, :]
    for i in range(m):
        for j in range(m):
            Sbb[i, j] = S[idx[i], idx[j]]
        for c in range(d):
            Sb[i, c] = S[idx[i], c]
    if not spd_solve(Sbb, Sb, X, ws[8, :m, :m]):
        return False
    for r in range(d):
        for i in range(m):
            K[r, idx[i]] = X[i, r]
    for i in range(m):
        for j in range(m):
            K[idx[i], idx[j]] = 1.0 if i == j else 0.0
    return True


@njit(cache=True)
def sigma_rhs(S, Ph, A, D, idx_flat, offsets, Ms, out, ws):
    d = S.shape[0]
    Acl, K, T1, T2 = ws[0], ws[1], ws[2], ws[3]
    Acl[:, :] = A
    for b in range(offsets.size - 1):
        if not gain(S, idx_flat[offsets[b] : offsets[b + 1]], K, ws):
            return False
        _mm(Ms[b], Ph, T1)
        _mm(T1, K, T2)
        for i in range(d):
            for j in range(d):
                Acl[i, j] -= T2[i, j]
    _mm(Acl, S, T1)
    for i in range(d):
        for j in range(d):
            out[i, j] = D[i, j] + T1[i, j] + T1[j, i]
    return True


@njit(cache=True)
def phi_rhs(X, S, Q, A, BRB, idx_flat, offsets, Ms, out, ws):
    # out = -(Q + A'X + XA - X BRB X + sum_b (I-K_b)' X M_b X (I-K_b))
    d = X.shape[0]
    K, T1, T2, W = ws[1], ws[2], ws[3], ws[4]
    _mm(X, A, T1)
    _mm(X, BRB, T2)
    _mm(T2, X, W)
    for i in range(d):
        for j in range(d):
            out[i, j] = Q[i, j] + T1[i, j] + T1[j, i] - W[i, j]
    for b in range(offsets.size - 1):
        idx = idx_flat[offsets[b] : offsets[b + 1]]
        if idx.size == d:
            continue
        if not gain(S, idx, K, ws):
            return False
        for i in range(d):
            for j in range(d):
                K[i, j] = (1.0 if i == j else 0.0) - K[i, j]
        _mm(X, Ms[b], T1)
        _mm(T1, X, W)
        _mm(W, K, T1)
        _mtm(K, T1, T2)
        for i in range(d):
            for j in range(d):
                out[i, j] += T2[i, j]
    for i in range(d):
        for j in range(d):
            out[i, j] = -out[i, j]
    return True


@njit(cache=True)
def _axpy(X, h, k, Y):
    # Y = X + h k
    n, m = X.shape
    for i in range(n):
        for j in range(m):
            Y[i, j] = X[i, j] + h * k[i, j]


@njit(cache=True)
def _rk4_update(X, h, k1, k2, k3, k4, out):
    """``out = sym(X + h/6 (k1 + 2 k2 + 2 k3 + k4))``; returns whether it is finite."""
    d = X.shape[0]
    c = h / 6.0
    for i in range(d):
        for j in range(d):
            out[i, j] = X[i, j] + c * (k1[i, j] + 2.0 * k2[i, j] + 2.0 * k3[i, j] + k4[i, j])
    ok = True
    for i in range(d):
        for j in range(i, d):
            v = 0.5 * (out[i, j] + out[j, i])
            out[i, j] = v
            out[j, i] = v
            if not np.isfinite(v):
                ok = False
    return ok


@njit(cache=True)
def forward_sigma(S0, phi_nodes, phi_mids, dt, A, D, idx_flat, offsets, Ms):
    n = phi_nodes.shape[0] - 1
    d = S0.shape[0]
    vals = np.empty((n + 1, d, d))
    ders = np.empty((n + 1, d, d))
    ks = np.empty((4, d, d))
    ws = np.empty((N_SCRATCH, d, d))
    Y = ws[9]
    vals[0] = S0
    half = 0.5 * dt
    for k in range(n):
        X = vals[k]
        ok = sigma_rhs(X, phi_nodes[k], A, D, idx_flat, offsets, Ms, ks[0], ws)
        _axpy(X, half, ks[0], Y)
        ok = ok and sigma_rhs(Y, phi_mids[k], A, D, idx_flat, offsets, Ms, ks[1], ws)
        _axpy(X, half, ks[1], Y)
        ok = ok and sigma_rhs(Y, phi_mids[k], A, D, idx_flat, offsets, Ms, ks[2], ws)
        _axpy(X, dt, ks[2], Y)
        ok = ok and sigma_rhs(Y, phi_nodes[k + 1], A, D, idx_flat, offsets, Ms, ks[3], ws)
        if not ok:
            return vals, ders, SINGULAR, k
        ders[k] = ks[0]
        if not _rk4_update(X, dt, ks[0], ks[1], ks[2], ks[3], vals[k + 1]):
            return vals, ders, NONFINITE, k + 1
    if not sigma_rhs(vals[n], phi_nodes[n], A, D, idx_flat, offsets, Ms, ders[n], ws):
        return vals, ders, SINGULAR, n
    return vals, ders, OK, -1


@njit(cache=True)
def backward_phi(PT, sig_nodes, sig_mids, dt, Q, A, BRB, idx_flat, offsets, Ms):
    n = sig_nodes.shape[0] - 1
    d = PT.shape[0]
    vals = np.empty((n + 1, d, d))
    ders = np.empty((n + 1, d, d))
    ks = np.empty((4, d, d))
    ws = np.empty((N_SCRATCH, d, d))
    Y = ws[9]
    vals[n] = PT
    h = -dt
    half = 0.5 * h
    for k in range(n, 0, -1):
        X = vals[k]
        ok = phi_rhs(X, sig_nodes[k], Q, A, BRB, idx_flat, offsets, Ms, ks[0], ws)
        _axpy(X, half, ks[0], Y)
        ok = ok and phi_rhs(Y, sig_mids[k - 1], Q, A, BRB, idx_flat, offsets, Ms, ks[1], ws)
        _axpy(X, half, ks[1], Y)
        ok = ok and phi_rhs(Y, sig_mids[k - 1], Q, A, BRB, idx_flat, offsets, Ms, ks[2], ws)
        _axpy(X, h, ks[2], Y)
        ok = ok and phi_rhs(Y, sig_nodes[k - 1], Q, A, BRB, idx_flat, offsets, Ms, ks[3], ws)
        if not ok:
            return vals, ders, SINGULAR, k
        ders[k] = ks[0]
        if not _rk4_update(X, h, ks[0], ks[1], ks[2], ks[3], vals[k - 1]):
            return vals, ders, NONFINITE, k - 1
    if not phi_rhs(vals[0], sig_nodes[0], Q, A, BRB, idx_flat, offsets, Ms, ders[0], ws):
        return vals, ders, SINGULAR, 0
    return vals, ders, OK, -1
