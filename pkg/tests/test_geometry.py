import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oavnn.errors import ContractViolation, DegenerateCloudError, FormatError, ParseError
from oavnn.geometry import (
    SHAPE_KINDS,
    PointCloud,
    ShapeSpec,
    TransformO3,
    apply_transform,
    center_unit_scale,
    gen_shape,
    knn,
    load_xyz,
    mirror_residual,
    mirror_x,
    nn_embedding,
    random_o3,
    save_xyz,
)

# E|trace| under Haar measure on SO(3): integral of |1 + 2 cos t| (1 - cos t)/pi
# over [0, pi], by adaptive quadrature split at the root t = 2 pi / 3.
HAAR_MEAN_ABS_TRACE = 0.8269933431326879


# -- PointCloud ------------------------------------------------------------


def test_point_cloud_validation():
    with pytest.raises(ContractViolation):
        PointCloud(np.zeros((1, 3)))
    with pytest.raises(ContractViolation):
        PointCloud(np.zeros((4, 2)))
    with pytest.raises(ContractViolation):
        PointCloud([[0, 0, 0], [np.nan, 0, 0]])
    with pytest.raises(ContractViolation):
        PointCloud(np.zeros((2, 3)), labels=[0, 2])


def test_point_cloud_is_read_only():
    c = PointCloud(np.eye(3), [0, 1, 0])
    with pytest.raises(ValueError):
        c.points[0, 0] = 9.0


# -- XYZ I/O ---------------------------------------------------------------


def test_xyz_round_trip_is_exact(tmp_path):
    rng = np.random.default_rng(0)
    cloud = PointCloud(rng.normal(size=(20, 3)) * 1e-3, rng.integers(0, 2, 20), "demo")
    save_xyz(cloud, tmp_path / "c.xyz")
    back = load_xyz(tmp_path / "c.xyz")
    assert np.array_equal(back.points, cloud.points)
    assert np.array_equal(back.labels, cloud.labels)


def test_xyz_unlabeled_and_comments(tmp_path):
    p = tmp_path / "u.xyz"
    p.write_text("# header\n0 0 0\n\n1 2 3\n")
    c = load_xyz(p)
    assert c.labels is None
    np.testing.assert_array_equal(c.points, [[0, 0, 0], [1, 2, 3]])


@pytest.mark.parametrize(
    "text, line",
    [("0 0 0\n1 2\n", 2), ("0 0 0\n1 x 3\n", 2), ("0 0 0 1\n1 1 1 7\n", 2)],
)
def test_xyz_parse_error_carries_line(tmp_path, text, line):
    p = tmp_path / "bad.xyz"
    p.write_text(text)
    with pytest.raises(ParseError) as info:
        load_xyz(p)
    assert info.value.line == line
    assert str(info.value).startswith(f"line {line}:")


def test_xyz_mixed_labels(tmp_path):
    p = tmp_path / "mixed.xyz"
    p.write_text("0 0 0 1\n1 1 1\n")
    with pytest.raises(FormatError):
        load_xyz(p)


# -- normalisation, kNN, embedding ----------------------------------------


def test_center_unit_scale():
    c = center_unit_scale(PointCloud([[1, 1, 1], [3, 1, 1], [2, 5, 1]]))
    np.testing.assert_allclose(c.points.mean(axis=0), 0, atol=1e-15)
    assert np.linalg.norm(c.points, axis=1).max() == pytest.approx(1.0)
    with pytest.raises(DegenerateCloudError):
        center_unit_scale(PointCloud([[1, 2, 3], [1, 2, 3]]))


def test_knn_collinear_ties_break_by_index():
    # point 0 at 0, point 1 at 1, point 2 at 3: point 1 is nearest to both others
    pts = np.array([[0.0, 0, 0], [1.0, 0, 0], [3.0, 0, 0]])
    np.testing.assert_array_equal(knn(pts, 1)[:, 0], [1, 0, 1])
    # equidistant neighbours: smaller index first
    sym = np.array([[0.0, 0, 0], [1.0, 0, 0], [-1.0, 0, 0]])
    np.testing.assert_array_equal(knn(sym, 2)[0], [1, 2])


def test_knn_bounds():
    with pytest.raises(ContractViolation):
        knn(np.eye(3), 3)
    with pytest.raises(ContractViolation):
        knn(np.eye(3), 0)


def test_knn_matches_brute_force():
    rng = np.random.default_rng(1)
    pts = rng.normal(size=(40, 3))
    d = np.linalg.norm(pts[:, None] - pts[None], axis=-1)
    for i in range(40):
        expect = sorted((d[i, j], j) for j in range(40) if j != i)[:7]
        assert list(knn(pts, 7)[i]) == [j for _, j in expect]


def test_nn_embedding_layout():
    rng = np.random.default_rng(2)
    pts = rng.normal(size=(12, 3))
    emb = nn_embedding(pts, 4)
    assert emb.shape == (12, 4, 2, 3)
    idx = knn(pts, 4)
    np.testing.assert_array_equal(emb[3, 1, 0], pts[idx[3, 1]] - pts[3])
    np.testing.assert_array_equal(emb[3, 1, 1], pts[3])


# -- transforms ------------------------------------------------------------


def test_transform_validation():
    with pytest.raises(ContractViolation):
        TransformO3(np.ones((3, 3)))
    with pytest.raises(ContractViolation):
        TransformO3(np.eye(3), det=-1)
    assert TransformO3(np.diag([1.0, -1.0, 1.0])).det == -1


@given(st.integers(0, 2**32 - 1), st.booleans())
@settings(max_examples=200, deadline=None)
def test_random_o3_is_orthogonal(seed, improper):
    R = random_o3(seed, improper)
    assert np.abs(R.matrix.T @ R.matrix - np.eye(3)).max() < 1e-12
    assert R.det == (-1 if improper else 1)


def test_random_o3_haar_moments():
    rng = np.random.default_rng(42)
    tr = np.array([np.trace(random_o3(rng).matrix) for _ in range(10000)])
    # standard error of the mean of |tr| is about 0.006 here
    assert abs(np.abs(tr).mean() - HAAR_MEAN_ABS_TRACE) < 0.02
    assert abs((tr**2).mean() - 1.0) < 0.1  # second moment of the trace is 1
    mean_matrix = np.mean([random_o3(rng).matrix for _ in range(5000)], axis=0)
    assert np.abs(mean_matrix).max() < 0.05


def test_random_o3_agrees_with_scipy_haar_sampler():
    from scipy.spatial.transform import Rotation

    ref = np.abs(np.trace(Rotation.random(20000, random_state=7).as_matrix(), axis1=1, axis2=2)).mean()
    assert abs(ref - HAAR_MEAN_ABS_TRACE) < 0.02


# -- synthetic shapes ------------------------------------------------------


@pytest.mark.parametrize("kind", SHAPE_KINDS)
def test_gen_shape_contract(kind):
    c = gen_shape(ShapeSpec(kind, 256, 3))
    assert c.points.shape == (256, 3)
    assert np.linalg.norm(c.points, axis=1).max() == pytest.approx(1.0)
    np.testing.assert_allclose(c.points.mean(axis=0), 0, atol=1e-12)
    assert mirror_residual(c.points) == 0.0
    assert c.labels.sum() == 128
    np.testing.assert_array_equal(c.labels, (c.points[:, 0] > 0).astype(int))


def test_table_has_two_planes():
    c = gen_shape(ShapeSpec("table", 256, 1))
    assert mirror_residual(c.points, (1, 0, 0)) == 0.0
    assert mirror_residual(c.points, (0, 1, 0)) == 0.0


def test_gen_shape_deterministic_and_seed_sensitive():
    a, b = gen_shape(ShapeSpec("chair", 128, 5)), gen_shape(ShapeSpec("chair", 128, 5))
    assert np.array_equal(a.points, b.points)
    assert not np.array_equal(a.points, gen_shape(ShapeSpec("chair", 128, 6)).points)


def test_jitter_breaks_mirror():
    c = gen_shape(ShapeSpec("airplane", 256, 0, 0.05))
    assert mirror_residual(c.points) > 1e-3


def test_shape_spec_validation():
    with pytest.raises(ContractViolation):
        ShapeSpec("boat")
    with pytest.raises(ContractViolation):
        ShapeSpec("airplane", 255)
    with pytest.raises(ContractViolation):
        ShapeSpec("table", 250)
    with pytest.raises(ContractViolation):
        ShapeSpec("cap", jitter_sigma=-1)


def test_apply_transform_and_mirror():
    c = gen_shape(ShapeSpec("cap", 64, 0))
    R = random_o3(3)
    moved = apply_transform(c, R)
    np.testing.assert_allclose(moved.points @ R.matrix.T, c.points, atol=1e-15)
    np.testing.assert_array_equal(mirror_x(np.array([[1.0, 2, 3]])), [[-1.0, 2, 3]])
