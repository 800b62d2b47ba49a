"""Hot numeric kernels, each with a numba and a numpy implementation.

Public entry points dispatch on :func:`oavnn._accel.backend`. The ``*_numba``
and ``*_numpy`` functions are importable directly so both paths can be tested
against each other and benchmarked.

Layouts: attention kernels take channel-major ``C x N x 3`` arrays so that the
inner loop over points walks contiguous memory.
"""

import numpy as np

from . import _accel
from ._accel import njit

# ---------------------------------------------------------------------------
# cross-product attention
# ---------------------------------------------------------------------------


@njit
def attention_forward_numba(Q, K, V, eps):
    C, N, _ = Q.shape
    alpha = np.empty((C, N, N))
    out = np.zeros((C, N, 3))
    for c in range(C):
        for p in range(N):
            q0 = Q[c, p, 0]
            q1 = Q[c, p, 1]
            q2 = Q[c, p, 2]
            row = alpha[c, p]
            top = -np.inf
            for r in range(N):
                k0 = K[c, r, 0]
                k1 = K[c, r, 1]
                k2 = K[c, r, 2]
                x = q1 * k2 - q2 * k1
                y = q2 * k0 - q0 * k2
                z = q0 * k1 - q1 * k0
                s = np.sqrt(x * x + y * y + z * z)
                row[r] = s
                if s > top:
                    top = s
            total = 0.0
            for r in range(N):
                e = np.exp(row[r] - top)
                row[r] = e
                total += e
            o0 = 0.0
            o1 = 0.0
            o2 = 0.0
            for r in range(N):
                a = row[r] / total
                row[r] = a
                v0 = V[c, r, 0]
                v1 = V[c, r, 1]
                v2 = V[c, r, 2]
                x = q1 * v2 - q2 * v1
                y = q2 * v0 - q0 * v2
                z = q0 * v1 - q1 * v0
                f = a / (np.sqrt(x * x + y * y + z * z) + eps)
                o0 += f * x
                o1 += f * y
                o2 += f * z
            out[c, p, 0] = o0
            out[c, p, 1] = o1
            out[c, p, 2] = o2
    return out, alpha


@njit
def attention_backward_numba(Q, K, V, alpha, G, eps):
    C, N, _ = Q.shape
    dQ = np.zeros((C, N, 3))
    dK = np.zeros((C, N, 3))
    dV = np.zeros((C, N, 3))
    proj = np.empty(N)
    for c in range(C):
        for p in range(N):
            q0 = Q[c, p, 0]
            q1 = Q[c, p, 1]
            q2 = Q[c, p, 2]
            g0 = G[c, p, 0]
            g1 = G[c, p, 1]
            g2 = G[c, p, 2]
            # <g, u_r> for every key, and its alpha-weighted mean
            mean_proj = 0.0
            for r in range(N):
                v0 = V[c, r, 0]
                v1 = V[c, r, 1]
                v2 = V[c, r, 2]
                x = q1 * v2 - q2 * v1
                y = q2 * v0 - q0 * v2
                z = q0 * v1 - q1 * v0
                d = np.sqrt(x * x + y * y + z * z) + eps
                pr = (g0 * x + g1 * y + g2 * z) / d
                proj[r] = pr
                mean_proj += alpha[c, p, r] * pr
            for r in range(N):
                a = alpha[c, p, r]
                # logit path: s = |q x k|
                k0 = K[c, r, 0]
                k1 = K[c, r, 1]
                k2 = K[c, r, 2]
                x = q1 * k2 - q2 * k1
                y = q2 * k0 - q0 * k2
                z = q0 * k1 - q1 * k0
                s = np.sqrt(x * x + y * y + z * z)
                if s > 0.0:
                    ds = a * (proj[r] - mean_proj) / s
                    m0 = ds * x
                    m1 = ds * y
                    m2 = ds * z
                    # dq += k x dm ; dk += dm x q
                    dQ[c, p, 0] += k1 * m2 - k2 * m1
                    dQ[c, p, 1] += k2 * m0 - k0 * m2
                    dQ[c, p, 2] += k0 * m1 - k1 * m0
                    dK[c, r, 0] += m1 * q2 - m2 * q1
                    dK[c, r, 1] += m2 * q0 - m0 * q2
                    dK[c, r, 2] += m0 * q1 - m1 * q0
                # value path: u = w / (|w| + eps), w = q x v
                v0 = V[c, r, 0]
                v1 = V[c, r, 1]
                v2 = V[c, r, 2]
                x = q1 * v2 - q2 * v1
                y = q2 * v0 - q0 * v2
                z = q0 * v1 - q1 * v0
                n = np.sqrt(x * x + y * y + z * z)
                d = n + eps
                h0 = a * g0 / d
                h1 = a * g1 / d
                h2 = a * g2 / d
                if n > 0.0:
                    t = a * (g0 * x + g1 * y + g2 * z) / (n * d * d)
                    h0 -= t * x
                    h1 -= t * y
                    h2 -= t * z
                dQ[c, p, 0] += v1 * h2 - v2 * h1
                dQ[c, p, 1] += v2 * h0 - v0 * h2
                dQ[c, p, 2] += v0 * h1 - v1 * h0
                dV[c, r, 0] += h1 * q2 - h2 * q1
                dV[c, r, 1] += h2 * q0 - h0 * q2
                dV[c, r, 2] += h0 * q1 - h1 * q0
    return dQ, dK, dV


def _softmax_rows(s):
    e = np.exp(s - s.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def attention_forward_numpy(Q, K, V, eps):
    C, N, _ = Q.shape
    alpha = np.empty((C, N, N))
    out = np.empty((C, N, 3))
    for c in range(C):
        q = Q[c][:, None, :]
        s = np.linalg.norm(np.cross(q, K[c][None, :, :]), axis=-1)
        a = _softmax_rows(s)
        w = np.cross(q, V[c][None, :, :])
        f = a / (np.linalg.norm(w, axis=-1) + eps)
        alpha[c] = a
        out[c] = np.einsum("pr,prd->pd", f, w)
    return out, alpha


def attention_backward_numpy(Q, K, V, alpha, G, eps):
    C, N, _ = Q.shape
    dQ = np.zeros((C, N, 3))
    dK = np.zeros((C, N, 3))
    dV = np.zeros((C, N, 3))
    for c in range(C):
        q = Q[c][:, None, :]
        k = K[c][None, :, :]
        v = V[c][None, :, :]
        g = G[c][:, None, :]
        a = alpha[c]
        w = np.cross(q, v)
        n = np.linalg.norm(w, axis=-1)
        d = n + eps
        proj = np.sum(g * w, axis=-1) / d
        ds = a * (proj - np.sum(a * proj, axis=1, keepdims=True))
        m = np.cross(q, k)
        s = np.linalg.norm(m, axis=-1)
        coef = np.divide(ds, s, out=np.zeros_like(s), where=s > 0)
        dm = coef[..., None] * m
        dQ[c] += np.cross(k, dm).sum(axis=1)
        dK[c] += np.cross(dm, q).sum(axis=0)
        h = (a / d)[..., None] * g
        t = np.divide(a * np.sum(g * w, axis=-1), n * d * d, out=np.zeros_like(n), where=n > 0)
        h = h - t[..., None] * w
        dQ[c] += np.cross(v, h).sum(axis=1)
        dV[c] += np.cross(h, q).sum(axis=0)
    return dQ, dK, dV


def attention_forward(Q, K, V, eps):
    """Per-channel cross-product attention over points.

    ``Q, K, V`` are ``C x N x 3``. Returns ``(out C x N x 3, alpha C x N x N)``.
    """
    Q, K, V = (np.ascontiguousarray(a, dtype=np.float64) for a in (Q, K, V))
    if _accel.backend() == "numba":
        return attention_forward_numba(Q, K, V, float(eps))
    return attention_forward_numpy(Q, K, V, eps)


def attention_backward(Q, K, V, alpha, G, eps):
    Q, K, V, alpha, G = (np.ascontiguousarray(a, dtype=np.float64) for a in (Q, K, V, alpha, G))
    if _accel.backend() == "numba":
        return attention_backward_numba(Q, K, V, alpha, G, float(eps))
    return attention_backward_numpy(Q, K, V, alpha, G, eps)


# ---------------------------------------------------------------------------
# neighbour ordering
# ---------------------------------------------------------------------------


@njit
def neighbor_order_numba(P):
    N = P.shape[0]
    order = np.empty((N, N - 1), dtype=np.int64)
    d2 = np.empty(N)
    for i in range(N):
        for j in range(N):
            dx = P[j, 0] - P[i, 0]
            dy = P[j, 1] - P[i, 1]
            dz = P[j, 2] - P[i, 2]
            d2[j] = dx * dx + dy * dy + dz * dz
        d2[i] = np.inf
        idx = np.argsort(d2, kind="mergesort")
        for m in range(N - 1):
            order[i, m] = idx[m]
    return order


def neighbor_order_numpy(P):
    N = P.shape[0]
    diff = P[None, :, :] - P[:, None, :]
    d2 = np.sum(diff * diff, axis=-1)
    d2[np.arange(N), np.arange(N)] = np.inf
    return np.argsort(d2, axis=1, kind="stable")[:, : N - 1]


def neighbor_order(P):
    """All other points of each point, sorted by (squared distance, index)."""
    P = np.ascontiguousarray(P, dtype=np.float64)
    if _accel.backend() == "numba":
        return neighbor_order_numba(P)
    return neighbor_order_numpy(P)


# ---------------------------------------------------------------------------
# shell vectors and directed cross products
# ---------------------------------------------------------------------------


def shell_bounds(n_neighbors, n_shells):
    """Start offsets of each shell; the last shell absorbs the remainder."""
    size = n_neighbors // n_shells
    starts = np.arange(n_shells + 1, dtype=np.int64) * size
    starts[-1] = n_neighbors
    return starts


@njit
def shell_vectors_numba(P, order, bounds):
    N = P.shape[0]
    n = bounds.shape[0] - 1
    out = np.zeros((N, n, 3))
    for i in range(N):
        for j in range(n):
            lo = bounds[j]
            hi = bounds[j + 1]
            sx = 0.0
            sy = 0.0
            sz = 0.0
            for m in range(lo, hi):
                t = order[i, m]
                sx += P[t, 0] - P[i, 0]
                sy += P[t, 1] - P[i, 1]
                sz += P[t, 2] - P[i, 2]
            cnt = hi - lo
            out[i, j, 0] = sx / cnt
            out[i, j, 1] = sy / cnt
            out[i, j, 2] = sz / cnt
    return out


def shell_vectors_numpy(P, order, bounds):
    rel = P[order] - P[:, None, :]
    n = len(bounds) - 1
    out = np.empty((P.shape[0], n, 3))
    for j in range(n):
        lo, hi = bounds[j], bounds[j + 1]
        # explicit sequential sum keeps both backends bit-compatible
        acc = np.zeros((P.shape[0], 3))
        for m in range(lo, hi):
            acc += rel[:, m, :]
        out[:, j, :] = acc / (hi - lo)
    return out


def shell_vectors(P, order, bounds):
    P = np.ascontiguousarray(P, dtype=np.float64)
    order = np.ascontiguousarray(order, dtype=np.int64)
    bounds = np.ascontiguousarray(bounds, dtype=np.int64)
    if _accel.backend() == "numba":
        return shell_vectors_numba(P, order, bounds)
    return shell_vectors_numpy(P, order, bounds)


@njit
def cross_features_numba(S):
    N, n, _ = S.shape
    out = np.zeros((N, 3))
    pairs = n * (n - 1) // 2
    for i in range(N):
        cx = 0.0
        cy = 0.0
        cz = 0.0
        for j in range(n):
            a0 = S[i, j, 0]
            a1 = S[i, j, 1]
            a2 = S[i, j, 2]
            for k in range(j + 1, n):
                b0 = S[i, k, 0]
                b1 = S[i, k, 1]
                b2 = S[i, k, 2]
                cx += a1 * b2 - a2 * b1
                cy += a2 * b0 - a0 * b2
                cz += a0 * b1 - a1 * b0
        out[i, 0] = cx / pairs
        out[i, 1] = cy / pairs
        out[i, 2] = cz / pairs
    return out


def cross_features_numpy(S):
    N, n, _ = S.shape
    acc = np.zeros((N, 3))
    for j in range(n):
        for k in range(j + 1, n):
            a, b = S[:, j, :], S[:, k, :]
            acc[:, 0] += a[:, 1] * b[:, 2] - a[:, 2] * b[:, 1]
            acc[:, 1] += a[:, 2] * b[:, 0] - a[:, 0] * b[:, 2]
            acc[:, 2] += a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0]
    return acc / (n * (n - 1) // 2)


def cross_features(S):
    """Mean of nearer-cross-further shell-vector products, one row per point."""
    S = np.ascontiguousarray(S, dtype=np.float64)
    if _accel.backend() == "numba":
        return cross_features_numba(S)
    return cross_features_numpy(S)
