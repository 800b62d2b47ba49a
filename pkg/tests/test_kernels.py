import numpy as np
import pytest

from oavnn import _accel, kernels
from oavnn import autodiff as ad

pytestmark = pytest.mark.skipif(not _accel.NUMBA_AVAILABLE, reason="numba not installed")


def _qkv(seed, C=3, N=17):
    rng = np.random.default_rng(seed)
    return tuple(rng.normal(size=(C, N, 3)) for _ in range(3))


@pytest.mark.parametrize("seed", range(5))
def test_attention_forward_backends_agree(seed):
    Q, K, V = _qkv(seed)
    out_nb, a_nb = kernels.attention_forward_numba(Q, K, V, 1e-8)
    out_np, a_np = kernels.attention_forward_numpy(Q, K, V, 1e-8)
    np.testing.assert_allclose(out_nb, out_np, rtol=1e-12, atol=1e-14)
    np.testing.assert_allclose(a_nb, a_np, rtol=1e-12, atol=1e-15)
    np.testing.assert_allclose(a_nb.sum(axis=-1), 1.0, rtol=1e-14)


@pytest.mark.parametrize("seed", range(5))
def test_attention_backward_backends_agree(seed):
    Q, K, V = _qkv(seed)
    G = np.random.default_rng(100 + seed).normal(size=Q.shape)
    _, alpha = kernels.attention_forward_numpy(Q, K, V, 1e-8)
    for a, b in zip(
        kernels.attention_backward_numba(Q, K, V, alpha, G, 1e-8),
        kernels.attention_backward_numpy(Q, K, V, alpha, G, 1e-8),
    ):
        np.testing.assert_allclose(a, b, rtol=1e-11, atol=1e-13)


def composed_attention(q, k, v, eps=1e-8):
    """The same attention assembled from generic primitives (points x channels x 3)."""
    N, C, _ = q.shape
    qb = ad.reshape(q, (N, 1, C, 3))
    kb = ad.reshape(k, (1, N, C, 3))
    vb = ad.reshape(v, (1, N, C, 3))
    shape = (N, N, C, 3)
    scores = ad.l2_norm_lastaxis(ad.batched_cross(ad.broadcast_to(qb, shape), ad.broadcast_to(kb, shape)))
    alpha = ad.softmax_axis(scores, axis=1)  # over the attended point
    w = ad.batched_cross(ad.broadcast_to(qb, shape), ad.broadcast_to(vb, shape))
    denom = ad.add(ad.l2_norm_lastaxis(w), ad.Tensor(np.full((N, N, C), eps)))
    coef = ad.div(alpha, denom)
    return ad.sum_axis(ad.elementwise_mul(ad.reshape(coef, (N, N, C, 1)), w), axis=1)


@pytest.mark.parametrize("backend", ["numba", "numpy"])
def test_fused_attention_matches_composed_primitives(backend):
    previous = _accel.set_backend(backend)
    try:
        rng = np.random.default_rng(8)
        q, k, v = (rng.normal(size=(9, 2, 3)) for _ in range(3))
        probe = rng.normal(size=(9, 2, 3))
        results = []
        for fn in (lambda *a: ad.cross_attention_op(*a)[0], composed_attention):
            leaves = [ad.Tensor(x, requires_grad=True) for x in (q, k, v)]
            with ad.Tape() as tape:
                out = fn(*leaves)
                loss = ad.sum_axis(ad.elementwise_mul(out, ad.Tensor(probe)))
            grads = ad.backward(tape, loss)
            results.append((out.data, [grads[tape.id_of(t)] for t in leaves]))
        (o1, g1), (o2, g2) = results
        np.testing.assert_allclose(o1, o2, rtol=1e-12, atol=1e-14)
        for a, b in zip(g1, g2):
            np.testing.assert_allclose(a, b, rtol=1e-10, atol=1e-12)
    finally:
        _accel.set_backend(previous)


def test_attention_two_point_example():
    # q = x; keys x and y: scores 0 and 1, so weights 1/(e+1) and e/(e+1)
    Q = np.array([[[1.0, 0, 0], [1.0, 0, 0]]])
    K = np.array([[[1.0, 0, 0], [0, 1.0, 0]]])
    V = np.array([[[0, 1.0, 0], [0, 0, 1.0]]])
    for fwd in (kernels.attention_forward_numba, kernels.attention_forward_numpy):
        out, alpha = fwd(Q, K, V, 0.0)
        e = np.e
        np.testing.assert_allclose(alpha[0, 0], [1 / (e + 1), e / (e + 1)])
        # x cross y = z, x cross z = -y, both unit
        np.testing.assert_allclose(out[0, 0], [0, -e / (e + 1), 1 / (e + 1)])


@pytest.mark.parametrize("seed", range(3))
def test_neighbor_order_backends_agree(seed):
    P = np.random.default_rng(seed).normal(size=(50, 3))
    P[7] = P[3] * 1.0  # a duplicate point forces an exact tie
    np.testing.assert_array_equal(kernels.neighbor_order_numba(P), kernels.neighbor_order_numpy(P))


def test_shell_and_cross_backends_bit_identical():
    P = np.random.default_rng(4).normal(size=(40, 3))
    order = kernels.neighbor_order_numpy(P)
    bounds = kernels.shell_bounds(39, 4)
    s_nb = kernels.shell_vectors_numba(P, order, bounds)
    s_np = kernels.shell_vectors_numpy(P, order, bounds)
    assert np.array_equal(s_nb, s_np)
    assert np.array_equal(kernels.cross_features_numba(s_nb), kernels.cross_features_numpy(s_np))


def test_shell_bounds():
    np.testing.assert_array_equal(kernels.shell_bounds(11, 3), [0, 3, 6, 11])
    np.testing.assert_array_equal(kernels.shell_bounds(8, 4), [0, 2, 4, 6, 8])


def test_set_backend_round_trip():
    previous = _accel.set_backend("numpy")
    assert _accel.backend() == "numpy"
    assert _accel.set_backend(previous) == "numpy"
    with pytest.raises(ValueError):
        _accel.set_backend("fortran")


def test_model_forward_is_backend_independent():
    from oavnn.geometry import ShapeSpec, gen_shape
    from oavnn.model import ModelConfig, build_model, forward_segmentation

    model = build_model(ModelConfig(variant="OAVNN", seed=2))
    cloud = gen_shape(ShapeSpec("chair", 64, 1))
    previous = _accel.set_backend("numpy")
    try:
        a = forward_segmentation(model, cloud).data
    finally:
        _accel.set_backend("numba")
    b = forward_segmentation(model, cloud).data
    _accel.set_backend(previous)
    np.testing.assert_allclose(a, b, rtol=1e-10, atol=1e-12)
