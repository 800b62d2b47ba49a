import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oavnn.errors import ContractViolation, DegenerateDirectionError
from oavnn.geometry import ShapeSpec, gen_shape, random_o3
from oavnn.symmetry import (
    accuracy_best_sign,
    cross_features,
    on_plane_mask,
    planar_symmetry_direction,
    plane_classifier,
    shell_vectors,
)

GOLDEN_POINTS = np.array(
    [
        [0.0, 0.0, 0.0],
        [1.0, 0.2, 0.0],
        [0.3, 1.1, 0.4],
        [-0.7, 0.5, 1.2],
        [0.9, -0.8, 0.6],
        [-0.2, -0.6, -1.0],
    ]
)
# Two shells; evaluated in exact rational arithmetic by a standalone
# transcription of the shell / cross-vector procedure.
GOLDEN_C = np.array([-0.15, -0.16, -0.19583333333333333])


def brute_force_direction(points, n):
    """Straight loops over points, shells and shell pairs."""
    N = len(points)
    per_point = []
    for i in range(N):
        others = sorted((float(np.sum((points[j] - points[i]) ** 2)), j) for j in range(N) if j != i)
        size = (N - 1) // n
        shells = []
        for s in range(n):
            hi = (s + 1) * size if s < n - 1 else N - 1
            members = [j for _, j in others[s * size : hi]]
            shells.append(np.mean([points[j] - points[i] for j in members], axis=0))
        pairs = [np.cross(shells[a], shells[b]) for a in range(n) for b in range(a + 1, n)]
        per_point.append(np.mean(pairs, axis=0))
    return np.mean(per_point, axis=0)


def test_golden_six_point_cloud():
    est = planar_symmetry_direction(GOLDEN_POINTS, 2)
    np.testing.assert_allclose(est.direction, GOLDEN_C, rtol=1e-13, atol=1e-15)
    assert not est.degenerate
    assert est.n_shells == 2


@pytest.mark.parametrize("n", [2, 3, 4, 7])
def test_matches_brute_force(n):
    pts = np.random.default_rng(n).normal(size=(23, 3))
    np.testing.assert_allclose(planar_symmetry_direction(pts, n).direction, brute_force_direction(pts, n), rtol=1e-12, atol=1e-15)


def test_shell_sizes_and_remainder():
    pts = np.random.default_rng(0).normal(size=(12, 3))  # 11 neighbours, 3 shells: 3, 3, 5
    shells = shell_vectors(pts, 3)
    assert [len(shells.members(0, j)) for j in range(3)] == [3, 3, 5]
    np.testing.assert_allclose(shells.shell_vectors[4, 2], (pts[shells.members(4, 2)] - pts[4]).mean(axis=0))


def test_shell_count_bounds():
    pts = np.eye(3)
    with pytest.raises(ContractViolation):
        shell_vectors(pts, 1)
    with pytest.raises(ContractViolation):
        shell_vectors(pts, 3)


def test_cross_features_of_basis():
    np.testing.assert_allclose(cross_features(np.eye(3)), [1 / 3, -1 / 3, 1 / 3])
    with pytest.raises(ContractViolation):
        cross_features(np.ones((1, 3)))


def test_direction_is_pseudovector():
    pts = np.random.default_rng(9).normal(size=(30, 3))
    c = planar_symmetry_direction(pts).direction
    for improper in (False, True):
        R = random_o3(4, improper)
        np.testing.assert_allclose(planar_symmetry_direction(pts @ R.matrix).direction, R.det * c @ R.matrix, atol=1e-14)


def test_translation_invariant():
    pts = np.random.default_rng(10).normal(size=(30, 3))
    np.testing.assert_allclose(
        planar_symmetry_direction(pts + [3.0, -1.0, 2.0]).direction, planar_symmetry_direction(pts).direction, atol=1e-13
    )


@given(st.integers(0, 10_000), st.sampled_from(["airplane", "chair", "cap"]), st.integers(2, 6))
@settings(max_examples=25, deadline=None)
def test_mirrored_cloud_direction_is_plane_normal(seed, kind, n):
    cloud = gen_shape(ShapeSpec(kind, 128, seed))
    c = planar_symmetry_direction(cloud, n).direction
    assert np.abs(c[1:]).max() <= 1e-9 * np.linalg.norm(c)


@given(st.integers(0, 10_000))
@settings(max_examples=20, deadline=None)
def test_two_plane_table_is_degenerate(seed):
    est = planar_symmetry_direction(gen_shape(ShapeSpec("table", 128, seed)))
    assert est.degenerate
    assert np.array_equal(est.unit_direction, np.zeros(3))


def test_plane_classifier_and_accuracy():
    cloud = gen_shape(ShapeSpec("airplane", 256, 1))
    est = planar_symmetry_direction(cloud)
    pred = plane_classifier(cloud, est.direction)
    assert accuracy_best_sign(pred, cloud.labels) == 1.0
    assert not on_plane_mask(cloud, est.direction).any()
    with pytest.raises(DegenerateDirectionError):
        plane_classifier(cloud, np.zeros(3))


def test_accuracy_best_sign():
    assert accuracy_best_sign([1, 1, 0, 0], [0, 0, 1, 1]) == 1.0
    assert accuracy_best_sign([1, 0, 1, 0], [1, 1, 0, 0]) == 0.5
    with pytest.raises(ContractViolation):
        accuracy_best_sign([1], [1, 0])
