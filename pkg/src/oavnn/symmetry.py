"""Planar symmetry direction from distance shells and directed cross products.

For every point the other points are ranked by distance and cut into ``n``
consecutive shells. The shell vector is the mean offset from the point to a
shell's members; crossing nearer shell vectors with further ones and averaging
gives a per-point cross vector, and the average over all points is the
estimate. Cross products make the estimate a pseudovector: for a cloud with
one mirror plane the in-plane components cancel pairwise and what remains is
normal to the plane. With two or more planes everything cancels.
"""

from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import ContractViolation, DegenerateDirectionError
from .geometry import PointCloud

DEFAULT_SHELLS = 4
ZERO_REL_TOL = 1e-9
ON_PLANE_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class ShellDecomposition:
    order: np.ndarray  # N x (N-1) neighbour indices by (distance, index)
    bounds: np.ndarray  # n + 1 offsets into each row of ``order``
    shell_vectors: np.ndarray  # N x n x 3

    @property
    def n_shells(self):
        return len(self.bounds) - 1

    def members(self, i, j):
        return self.order[i, self.bounds[j] : self.bounds[j + 1]]


@dataclass(frozen=True, eq=False)
class SymmetryEstimate:
    per_point: np.ndarray
    direction: np.ndarray
    magnitude: float
    unit_direction: np.ndarray
    degenerate: bool
    n_shells: int


def _points(cloud):
    return cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)


def shell_vectors(cloud, n=DEFAULT_SHELLS):
    pts = _points(cloud)
    N = pts.shape[0]
    if not 2 <= n <= N - 1:
        raise ContractViolation(f"number of shells must be in [2, {N - 1}], got {n}")
    if not np.all(np.isfinite(pts)):
        raise ContractViolation("point coordinates must be finite")
    order = kernels.neighbor_order(pts)
    bounds = kernels.shell_bounds(N - 1, n)
    return ShellDecomposition(order, bounds, kernels.shell_vectors(pts, order, bounds))


def cross_features(vectors):
    """Cross vector of one point (``n x 3``) or of every point (``N x n x 3``)."""
    v = np.asarray(vectors, dtype=np.float64)
    if v.shape[-2] < 2:
        raise ContractViolation("need at least two shell vectors")
    if v.ndim == 2:
        return kernels.cross_features(v[None])[0]
    return kernels.cross_features(v)


def planar_symmetry_direction(cloud, n=DEFAULT_SHELLS):
    pts = _points(cloud)
    shells = shell_vectors(pts, n)
    per_point = cross_features(shells.shell_vectors)
    direction = per_point.mean(axis=0)
    magnitude = float(np.linalg.norm(direction))
    scale = float(np.sqrt(np.sum(pts * pts, axis=1)).max())
    degenerate = magnitude <= ZERO_REL_TOL * scale
    unit = np.zeros(3) if degenerate else direction / magnitude
    return SymmetryEstimate(per_point, direction, magnitude, unit, degenerate, n)


def plane_classifier(cloud, direction):
    """1 where a point lies on the positive side of the plane through the origin."""
    pts = _points(cloud)
    d = np.asarray(direction, dtype=np.float64)
    norm = np.linalg.norm(d)
    if not norm > 0:
        raise DegenerateDirectionError("symmetry direction is the zero vector")
    proj = pts @ (d / norm)
    return (proj > ON_PLANE_TOL).astype(np.int64)


def on_plane_mask(cloud, direction):
    pts = _points(cloud)
    d = np.asarray(direction, dtype=np.float64)
    return np.abs(pts @ (d / np.linalg.norm(d))) <= ON_PLANE_TOL


def accuracy_best_sign(predicted, truth):
    """``max(acc, 1 - acc)``: the normal's sign is arbitrary."""
    p = np.asarray(predicted)
    t = np.asarray(truth)
    if p.shape != t.shape:
        raise ContractViolation(f"length mismatch: {p.shape} vs {t.shape}")
    if p.size == 0:
        raise ContractViolation("empty labelings")
    acc = float(np.mean(p == t))
    return max(acc, 1.0 - acc)
