"""Point clouds, XYZ I/O, neighbourhoods, O(3) transforms and synthetic shapes.

Convention: points are rows and transforms act on the right, ``X @ R``.

Synthetic shapes use x = left/right, y = front/back (nose at +y) and z = up.
Every generator samples half an object (x > 0), mirrors it across the x = 0
plane by exact negation, and labels the x < 0 half 0 and the x > 0 half 1.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from . import kernels
from .errors import ContractViolation, DegenerateCloudError, FormatError, ParseError

SHAPE_KINDS = ("airplane", "chair", "cap", "table")
DEFAULT_K = 10


@dataclass(frozen=True, eq=False)
class PointCloud:
    points: np.ndarray
    labels: np.ndarray | None = None
    name: str = ""

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ContractViolation(f"points must be N x 3, got {pts.shape}")
        if pts.shape[0] < 2:
            raise ContractViolation("a point cloud needs at least 2 points")
        if not np.all(np.isfinite(pts)):
            raise ContractViolation("point coordinates must be finite")
        pts.flags.writeable = False
        object.__setattr__(self, "points", pts)
        if self.labels is not None:
            lab = np.array(self.labels, dtype=np.int64)
            if lab.shape != (pts.shape[0],):
                raise ContractViolation(f"labels must have shape ({pts.shape[0]},), got {lab.shape}")
            if not np.all((lab == 0) | (lab == 1)):
                raise ContractViolation("labels must be 0 or 1")
            lab.flags.writeable = False
            object.__setattr__(self, "labels", lab)

    def __len__(self):
        return self.points.shape[0]

    def with_points(self, points):
        return replace(self, points=points)


@dataclass(frozen=True, eq=False)
class TransformO3:
    matrix: np.ndarray
    det: int = field(default=0)

    def __post_init__(self):
        m = np.array(self.matrix, dtype=np.float64)
        if m.shape != (3, 3):
            raise ContractViolation(f"transform must be 3 x 3, got {m.shape}")
        if np.abs(m.T @ m - np.eye(3)).max() > 1e-12:
            raise ContractViolation("transform matrix is not orthogonal")
        d = int(round(np.linalg.det(m)))
        if self.det not in (0, d):
            raise ContractViolation(f"declared det {self.det} does not match matrix det {d}")
        m.flags.writeable = False
        object.__setattr__(self, "matrix", m)
        object.__setattr__(self, "det", d)

    @property
    def T(self):
        return TransformO3(self.matrix.T)


@dataclass(frozen=True)
class ShapeSpec:
    kind: str
    n_points: int = 256
    seed: int = 0
    jitter_sigma: float = 0.0

    def __post_init__(self):
        if self.kind not in SHAPE_KINDS:
            raise ContractViolation(f"unknown shape kind {self.kind!r}; expected one of {SHAPE_KINDS}")
        if self.n_points < 2 or self.n_points % 2:
            raise ContractViolation("n_points must be even and at least 2")
        if self.kind == "table" and self.n_points % 4:
            raise ContractViolation("table shapes need n_points divisible by 4")
        if not self.jitter_sigma >= 0:
            raise ContractViolation("jitter_sigma must be >= 0")


# ---------------------------------------------------------------------------
# XYZ text format
# ---------------------------------------------------------------------------


def load_xyz(path, name=None):
    rows, labels = [], []
    with open(path, encoding="ascii") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) not in (3, 4):
                raise ParseError(f"expected 3 or 4 fields, got {len(parts)}", line=lineno)
            try:
                xyz = [float(p) for p in parts[:3]]
            except ValueError:
                raise ParseError(f"not a number in {line!r}", line=lineno) from None
            if len(parts) == 4:
                if parts[3] not in ("0", "1"):
                    raise ParseError(f"label must be 0 or 1, got {parts[3]!r}", line=lineno)
                labels.append(int(parts[3]))
            else:
                labels.append(None)
            rows.append(xyz)
    has = {lab is not None for lab in labels}
    if len(has) > 1:
        raise FormatError(f"{path}: mixed labeled and unlabeled lines")
    lab = np.array(labels, dtype=np.int64) if has == {True} else None
    if len(rows) < 2:
        raise ParseError(f"{path}: need at least 2 points, found {len(rows)}")
    return PointCloud(np.array(rows), lab, name if name is not None else str(path))


def save_xyz(cloud, path):
    with open(path, "w", encoding="ascii") as fh:
        if cloud.name:
            fh.write(f"# {cloud.name}\n")
        for i, p in enumerate(cloud.points):
            line = f"{p[0]:.17g} {p[1]:.17g} {p[2]:.17g}"
            if cloud.labels is not None:
                line += f" {int(cloud.labels[i])}"
            fh.write(line + "\n")


# ---------------------------------------------------------------------------
# normalisation, neighbourhoods, embedding
# ---------------------------------------------------------------------------


def center_unit_scale(cloud):
    pts = cloud.points
    if np.all(pts == pts[0]):
        raise DegenerateCloudError("all points are identical")
    centered = pts - pts.mean(axis=0)
    scale = np.sqrt(np.sum(centered * centered, axis=1)).max()
    return cloud.with_points(centered / scale)


def knn(points, k):
    """``N x k`` neighbour indices sorted by (distance, index), self excluded."""
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    if not 1 <= k <= n - 1:
        raise ContractViolation(f"k must be in [1, {n - 1}], got {k}")
    return np.ascontiguousarray(kernels.neighbor_order(points)[:, :k])


def nn_embedding(cloud, k=DEFAULT_K, index=None):
    """Edge features ``N x k x 2 x 3``: (neighbour - point, point)."""
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    idx = knn(pts, k) if index is None else index
    rel = pts[idx] - pts[:, None, :]
    absolute = np.broadcast_to(pts[:, None, :], rel.shape)
    return np.stack((rel, absolute), axis=2)


# ---------------------------------------------------------------------------
# transforms
# ---------------------------------------------------------------------------


def quaternion_matrix(q):
    w, x, y, z = q / np.linalg.norm(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def random_o3(seed, improper=False):
    """Haar-uniform rotation from a normalised Gaussian quaternion.

    ``seed`` may be an int or a ``numpy.random.Generator``. With ``improper``
    the rotation is composed with ``diag(-1, 1, 1)``.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    m = quaternion_matrix(rng.standard_normal(4))
    if improper:
        m = m @ np.diag([-1.0, 1.0, 1.0])
    # one polish step keeps orthogonality well under 1e-12
    u, _, vt = np.linalg.svd(m)
    return TransformO3(u @ vt)


def apply_transform(cloud, transform):
    m = transform.matrix if isinstance(transform, TransformO3) else np.asarray(transform)
    return cloud.with_points(cloud.points @ m)


def mirror_x(points):
    out = np.array(points, dtype=np.float64)
    out[:, 0] = -out[:, 0]
    return out


def mirror_residual(points, normal=(1.0, 0.0, 0.0)):
    """Largest distance from a reflected point to its nearest original point."""
    pts = np.asarray(points, dtype=np.float64)
    n = np.asarray(normal, dtype=np.float64)
    n = n / np.linalg.norm(n)
    refl = pts - 2.0 * np.outer(pts @ n, n)
    d2 = np.sum((refl[:, None, :] - pts[None, :, :]) ** 2, axis=-1)
    return float(np.sqrt(d2.min(axis=1)).max())


# ---------------------------------------------------------------------------
# synthetic half-objects (x > 0)
# ---------------------------------------------------------------------------


def _ellipsoid(rng, m, center, axes):
    d = rng.standard_normal((m, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    d[:, 0] = np.abs(d[:, 0])
    return center + d * axes


def _plate(rng, m, corner_lo, corner_hi):
    return rng.uniform(corner_lo, corner_hi, size=(m, 3))


def _cylinder(rng, m, center_xy, radius, z_lo, z_hi):
    t = rng.uniform(0.0, 2 * np.pi, m)
    z = rng.uniform(z_lo, z_hi, m)
    return np.column_stack((center_xy[0] + radius * np.cos(t), center_xy[1] + radius * np.sin(t), z))


def _split(m, weights):
    w = np.asarray(weights, dtype=np.float64)
    counts = np.floor(m * w / w.sum()).astype(int)
    counts[0] += m - counts.sum()
    return counts


def _half_airplane(rng, m, s):
    n_fus, n_wing, n_stab, n_fin = _split(m, [0.35, 0.38, 0.12, 0.15])
    fus = _ellipsoid(rng, n_fus, np.zeros(3), np.array([0.11, 1.0, 0.11]) * s[:3])
    # swept wing: leading edge moves aft with span
    span = rng.uniform(0.08, 1.0 * s[3], n_wing)
    frac = (span - 0.08) / (1.0 * s[3] - 0.08)
    lead = 0.25 - 0.55 * frac * s[4]
    chord = 0.45 - 0.25 * frac
    wing = np.column_stack(
        (span, lead - rng.uniform(0, 1, n_wing) * chord, 0.06 * frac + rng.uniform(-0.015, 0.015, n_wing))
    )
    sspan = rng.uniform(0.04, 0.35, n_stab)
    sfrac = sspan / 0.35
    stab = np.column_stack(
        (sspan, -0.78 - 0.15 * sfrac - rng.uniform(0, 1, n_stab) * (0.2 - 0.08 * sfrac), rng.uniform(0.04, 0.07, n_stab))
    )
    height = rng.uniform(0.08, 0.5 * s[5], n_fin)
    hfrac = height / (0.5 * s[5])
    fin = np.column_stack(
        (rng.uniform(1e-3, 0.015, n_fin), -0.7 - 0.2 * hfrac - rng.uniform(0, 1, n_fin) * (0.28 - 0.12 * hfrac), height)
    )
    return np.vstack((fus, wing, stab, fin))


def _half_chair(rng, m, s):
    n_seat, n_back, n_legs = _split(m, [0.4, 0.4, 0.2])
    w, d = 0.45 * s[0], 0.45 * s[1]
    seat = _plate(rng, n_seat, [1e-3, -d, -0.03], [w, d, 0.03])
    back = _plate(rng, n_back, [1e-3, -d - 0.04, 0.0], [w, -d + 0.04, 0.85 * s[2]])
    a = n_legs // 2
    legs = np.vstack(
        (
            _cylinder(rng, a, (w - 0.04, d - 0.04), 0.03, -0.75 * s[3], 0.0),
            _cylinder(rng, n_legs - a, (w - 0.04, -d + 0.04), 0.03, -0.75 * s[3], 0.0),
        )
    )
    return np.vstack((seat, back, legs))


def _half_cap(rng, m, s):
    n_dome, n_brim = _split(m, [0.65, 0.35])
    r = 0.5 * s[0]
    dome = _ellipsoid(rng, n_dome, np.zeros(3), np.array([r, r, 0.8 * r * s[1]]))
    dome[:, 2] = np.abs(dome[:, 2])
    # visor: annular sector in front (+y), within 65 degrees of the y axis
    ang = rng.uniform(0.0, np.deg2rad(65.0), n_brim)
    rad = r + np.sqrt(rng.uniform(0.0, 1.0, n_brim)) * 0.35 * s[2]
    brim = np.column_stack((rad * np.sin(ang), rad * np.cos(ang), rng.uniform(-0.01, 0.01, n_brim)))
    return np.vstack((dome, brim))


def _quarter_table(rng, m, s):
    n_top, n_legs = _split(m, [0.6, 0.4])
    w, d, h = 0.8 * s[0], 0.5 * s[1], 0.7 * s[2]
    top = _plate(rng, n_top, [1e-3, 1e-3, h - 0.02], [w, d, h + 0.02])
    legs = _cylinder(rng, n_legs, (w - 0.05, d - 0.05), 0.03, 0.0, h)
    legs[:, :2] = np.abs(legs[:, :2])
    return np.vstack((top, legs))


_HALF = {"airplane": _half_airplane, "chair": _half_chair, "cap": _half_cap}


def gen_shape(spec):
    """Labeled synthetic cloud; exactly mirror-symmetric when jitter is 0."""
    if not isinstance(spec, ShapeSpec):
        raise ContractViolation("gen_shape expects a ShapeSpec")
    rng = np.random.default_rng([spec.seed, SHAPE_KINDS.index(spec.kind)])
    # mild per-instance proportions
    s = rng.uniform(0.9, 1.1, size=6)
    if spec.kind == "table":
        quarter = _quarter_table(rng, spec.n_points // 4, s)
        quarter[:, 0] = np.maximum(quarter[:, 0], 1e-3)
        quarter[:, 1] = np.maximum(quarter[:, 1], 1e-3)
        quarter[:, 2] -= quarter[:, 2].mean()
        flip_y = quarter * np.array([1.0, -1.0, 1.0])
        half = np.vstack((quarter, flip_y))
    else:
        half = _HALF[spec.kind](rng, spec.n_points // 2, s)
        half[:, 0] = np.maximum(half[:, 0], 1e-3)
        # centre y, z on the half; x is centred by the mirror construction
        half[:, 1:] -= half[:, 1:].mean(axis=0)
    pts = np.vstack((half, mirror_x(half)))
    labels = np.concatenate((np.ones(len(half), dtype=np.int64), np.zeros(len(half), dtype=np.int64)))
    perm = rng.permutation(len(pts))
    pts, labels = pts[perm], labels[perm]
    name = f"{spec.kind}-{spec.seed}"
    if spec.jitter_sigma > 0:
        pts = pts + rng.normal(0.0, spec.jitter_sigma, size=pts.shape)
        return center_unit_scale(PointCloud(pts, labels, name))
    scale = np.sqrt(np.sum(pts * pts, axis=1)).max()
    return PointCloud(pts / scale, labels, name)
