"""Vector-neuron layers, the orientation-aware complex linear layer and
cross-product attention.

Features are ``... x C x 3``: channel axis second to last, spatial axis last.
All layers take and return :class:`~oavnn.autodiff.Tensor` (plain arrays are
accepted and treated as constants), so they can be trained on a tape.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ContractViolation

KINK_TOL = 1e-12
DEGENERATE_TOL = 1e-12


def _check_channels(x, w, what="input"):
    if x.ndim < 2 or x.shape[-1] != 3:
        raise ContractViolation(f"{what} must be ... x C x 3, got {x.shape}")
    if w.ndim != 2 or w.shape[1] != x.shape[-2]:
        raise ContractViolation(f"weight {w.shape} does not match {x.shape[-2]} {what} channels")


def vn_linear(X, W):
    """``out[..., j, :] = sum_k W[j, k] X[..., k, :]``."""
    X, W = ad.as_tensor(X), ad.as_tensor(W)
    _check_channels(X, W)
    return ad.channel_contract(W, X, axis=-2)


def vn_relu(X, W, U):
    """Vector ReLU: keep ``q = WX`` where it points along ``k = UX``, otherwise
    drop its component along ``k``."""
    X, W, U = ad.as_tensor(X), ad.as_tensor(W), ad.as_tensor(U)
    _check_channels(X, W)
    _check_channels(X, U)
    if W.shape != U.shape:
        raise ContractViolation(f"W {W.shape} and U {U.shape} differ")
    q = vn_linear(X, W)
    k = vn_linear(X, U)
    knorm = ad.l2_norm_lastaxis(k)
    tiny = knorm.data < KINK_TOL
    keep = (ad.batched_dot(q, k).data >= 0) | tiny
    safe = ad.select_where(tiny, np.ones(tiny.shape), knorm)
    khat = ad.div(k, ad.reshape(safe, safe.shape + (1,)))
    along = ad.batched_dot(q, khat)
    projected = ad.sub(q, ad.elementwise_mul(ad.reshape(along, along.shape + (1,)), khat))
    return ad.select_where(keep[..., None], q, projected)


def vn_mean_pool(X, axis=1):
    """Mean over the neighbour axis of an ``N x k x C x 3`` tensor."""
    return ad.mean_axis(ad.as_tensor(X), axis=axis)


def vn_global_mean(X):
    return ad.mean_axis(ad.as_tensor(X), axis=0, keepdims=True)


def vn_invariant(X, T):
    """Rotation/reflection-invariant scalars ``N x 3C``.

    A 3-vector frame ``D = T [X, mean(X)]`` is built per point; the output is
    every inner product between a feature channel and a frame vector.
    """
    X, T = ad.as_tensor(X), ad.as_tensor(T)
    if X.ndim != 3 or X.shape[-1] != 3:
        raise ContractViolation(f"expected N x C x 3, got {X.shape}")
    N, C, _ = X.shape
    if T.shape != (3, 2 * C):
        raise ContractViolation(f"frame weight must be 3 x {2 * C}, got {T.shape}")
    g = ad.broadcast_to(vn_global_mean(X), X.shape)
    D = vn_linear(ad.concat_axis([X, g], axis=1), T)
    dots = ad.batched_dot(ad.reshape(X, (N, C, 1, 3)), ad.reshape(D, (N, 1, 3, 3)))
    return ad.reshape(dots, (N, 3 * C))


@dataclass(frozen=True, eq=False)
class BasisField:
    bases: np.ndarray  # ... x C x 3 x 3, rows (U1, U2, J_hat)
    degenerate: np.ndarray  # ... x C bool


def orient_basis(J):
    """Right-handed orthonormal basis per vector, third row along ``J``."""
    J = np.asarray(ad.as_tensor(J).data)
    norm = np.linalg.norm(J, axis=-1)
    degenerate = norm < DEGENERATE_TOL
    jhat = np.divide(J, norm[..., None], out=np.zeros_like(J), where=~degenerate[..., None])
    ref = np.zeros_like(J)
    use_y = np.abs(jhat[..., 0]) > 0.9
    ref[..., 0] = np.where(use_y, 0.0, 1.0)
    ref[..., 1] = np.where(use_y, 1.0, 0.0)
    u1 = ref - np.sum(ref * jhat, axis=-1, keepdims=True) * jhat
    u1 /= np.linalg.norm(u1, axis=-1, keepdims=True)
    u2 = np.cross(jhat, u1)
    bases = np.stack((u1, u2, jhat), axis=-2)
    bases[degenerate] = np.eye(3)
    return BasisField(bases, degenerate)


def _check_complex(V, J, A, B, C):
    if V.shape != J.shape or V.ndim != 3 or V.shape[-1] != 3:
        raise ContractViolation(f"V {V.shape} and J {J.shape} must both be N x C x 3")
    if not A.shape == B.shape == C.shape or A.ndim != 2 or A.shape[1] != V.shape[1]:
        raise ContractViolation(
            f"weights {A.shape}, {B.shape}, {C.shape} must all be C' x {V.shape[1]}"
        )


def complex_linear(V, J, A, B, C):
    """Rotate and dilate each ``V[i, k]`` about the unit direction of ``J[i, k]``.

    ``out[i, j] = sum_k A[j,k] (v - (v.j)j) + B[j,k] (j x v) + C[j,k] (v.j)j``
    with ``j = J[i,k] / |J[i,k]|``. This equals ``R Z R^T v`` for any
    right-handed orthonormal completion ``R`` of ``j``. Channels with
    ``|J| < 1e-12`` contribute ``A[j,k] v``.
    """
    V, J, A, B, C = (ad.as_tensor(t) for t in (V, J, A, B, C))
    _check_complex(V, J, A, B, C)
    jn = ad.l2_norm_lastaxis(J)
    tiny = jn.data < DEGENERATE_TOL
    safe = ad.select_where(tiny, np.ones(tiny.shape), jn)
    jhat = ad.div(J, ad.reshape(safe, safe.shape + (1,)))
    jhat = ad.select_where(tiny[..., None], np.zeros(J.shape), jhat)
    along = ad.batched_dot(V, jhat)
    axial = ad.elementwise_mul(ad.reshape(along, along.shape + (1,)), jhat)
    planar = ad.sub(V, axial)
    turned = ad.batched_cross(jhat, V)
    return ad.add(ad.add(vn_linear(planar, A), vn_linear(turned, B)), vn_linear(axial, C))


def rotation_dilation_blocks(A, B, C):
    """``C' x C x 3 x 3`` blocks ``[[A, -B, 0], [B, A, 0], [0, 0, C]]``."""
    A, B, C = (np.asarray(ad.as_tensor(t).data) for t in (A, B, C))
    Z = np.zeros(A.shape + (3, 3))
    Z[..., 0, 0] = A
    Z[..., 0, 1] = -B
    Z[..., 1, 0] = B
    Z[..., 1, 1] = A
    Z[..., 2, 2] = C
    return Z


def complex_linear_basis(V, J, A, B, C, bases=None):
    """Reference evaluation through explicit bases: ``sum_k R Z R^T v``.

    ``bases`` (``N x C x 3 x 3``, rows U1, U2, J_hat) defaults to
    :func:`orient_basis`. Degenerate channels use the same ``A v`` rule as
    :func:`complex_linear`. Plain numpy; no gradients.
    """
    V, J = (np.asarray(ad.as_tensor(t).data) for t in (V, J))
    _check_complex(V, J, *(ad.as_tensor(t) for t in (A, B, C)))
    field = orient_basis(J)
    rows = field.bases if bases is None else np.asarray(bases, dtype=np.float64)
    Z = rotation_dilation_blocks(A, B, C)
    R = np.swapaxes(rows, -1, -2)  # columns U1, U2, J_hat
    coords = np.einsum("nkab,nka->nkb", R, V)  # R^T v
    mixed = np.einsum("jkab,nkb->njka", Z, coords)
    out_k = np.einsum("nkab,njkb->njka", R, mixed)
    if field.degenerate.any():
        A_ = np.asarray(ad.as_tensor(A).data)
        plain = A_[None, :, :, None] * V[:, None, :, :]
        out_k = np.where(field.degenerate[:, None, :, None], plain, out_k)
    return out_k.sum(axis=2)


def cross_attention(Q, K, V, eps=ad.ATTENTION_EPS):
    """Per-channel attention over points with cross-product scores.

    ``alpha[c, p, q] = softmax_q |Q[p,c] x K[q,c]|`` and
    ``out[p, c] = sum_q alpha[c,p,q] (Q[p,c] x V[q,c]) / (|Q[p,c] x V[q,c]| + eps)``.
    Returns ``(out N x C x 3, alpha C x N x N)``.
    """
    return ad.cross_attention_op(Q, K, V, eps)


def affine(X, W, b):
    """Pointwise affine map on the last axis: ``X W^T + b``."""
    return ad.add(ad.channel_contract(W, X, axis=-1), b)
