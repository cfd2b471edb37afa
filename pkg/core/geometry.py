"""
Point clouds: normalisation, kNN, synthetic shapes, augmentation and XYZ files.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.spatial.distance import cdist
from scipy.spatial.transform import Rotation

from core.config import AugmentParams
from core.errors import ConfigError, DataError, ParseError

logger = logging.getLogger(__name__)

CLASS_NAMES = ("sphere", "cube", "cylinder", "torus", "cone", "capsule", "cross", "pyramid")

# (low, high) per shape parameter
SHAPE_RANGES: dict[str, dict[str, tuple[float, float]]] = {
    "sphere": {"radius": (0.8, 1.2)},
    "cube": {"half": (0.6, 1.0)},
    "cylinder": {"radius": (0.4, 0.7), "height": (1.2, 2.0)},
    "torus": {"major": (0.7, 1.0), "minor": (0.2, 0.35)},
    "cone": {"radius": (0.5, 0.9), "height": (1.2, 2.0)},
    "capsule": {"radius": (0.3, 0.5), "height": (0.8, 1.4)},
    "cross": {"half_length": (0.8, 1.1), "thickness": (0.15, 0.25)},
    "pyramid": {"half_base": (0.6, 1.0), "height": (1.0, 1.6)},
}


@dataclass
class PointCloud:
    points: np.ndarray
    label: int | None = None
    degenerate: bool = False

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 3 or len(self.points) < 1:
            raise DataError(f"point cloud must be N x 3 with N >= 1, got {self.points.shape}")
        if not np.all(np.isfinite(self.points)):
            raise DataError("point cloud has non-finite coordinates")

    def __len__(self) -> int:
        return len(self.points)


@dataclass(frozen=True)
class AABB:
    min_corner: np.ndarray
    max_corner: np.ndarray

    @property
    def volume(self) -> float:
        return float(np.prod(self.max_corner - self.min_corner))

    def intersects(self, other: "AABB") -> bool:
        # closed intervals: touching faces count
        return bool(np.all(self.min_corner <= other.max_corner) and np.all(other.min_corner <= self.max_corner))

    @classmethod
    def empty(cls) -> "AABB":
        return cls(np.zeros(3), np.zeros(3))


@dataclass(frozen=True)
class SyntheticSpec:
    class_id: int
    n_points: int = 512
    seed: int = 0
    shape_params: dict[str, float] | None = field(default=None, hash=False)

    def __post_init__(self):
        if not 0 <= self.class_id < len(CLASS_NAMES):
            raise ConfigError(f"class id {self.class_id} outside [0, {len(CLASS_NAMES)})")
        if self.n_points < 8:
            raise ConfigError(f"synthetic clouds need at least 8 points, got {self.n_points}")

    @property
    def class_name(self) -> str:
        return CLASS_NAMES[self.class_id]


def normalize_unit_sphere(cloud: PointCloud) -> PointCloud:
    centered = cloud.points - cloud.points.mean(axis=0)
    radius = np.linalg.norm(centered, axis=1).max()
    if radius == 0.0:
        logger.warning("degenerate cloud: all %d points coincide", len(cloud))
        return replace(cloud, points=centered, degenerate=True)
    return replace(cloud, points=centered / radius)


def knn(queries: np.ndarray, keys: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k nearest keys per query, nearest first, ties to the lower index."""
    queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    keys = np.atleast_2d(np.asarray(keys, dtype=np.float64))
    if k > len(keys) or k < 1:
        raise ConfigError(f"knn: k={k} must be in [1, {len(keys)}]")
    dist = cdist(queries, keys, metric="sqeuclidean")
    return np.argsort(dist, axis=1, kind="stable")[:, :k]


# --- synthetic surfaces

def _pick_pieces(rng: np.random.Generator, n: int, areas) -> np.ndarray:
    areas = np.asarray(areas, dtype=np.float64)
    return rng.choice(len(areas), size=n, p=areas / areas.sum())


def _unit_vectors(rng: np.random.Generator, n: int) -> np.ndarray:
    v = rng.standard_normal((n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _box_surface(rng, n, half, center=(0.0, 0.0, 0.0)) -> np.ndarray:
    half = np.asarray(half, dtype=np.float64)
    # faces +-x, +-y, +-z
    face_areas = np.repeat([4 * half[1] * half[2], 4 * half[0] * half[2], 4 * half[0] * half[1]], 2)
    face = _pick_pieces(rng, n, face_areas)
    pts = rng.uniform(-1.0, 1.0, size=(n, 3)) * half
    axis = face // 2
    sign = np.where(face % 2 == 0, 1.0, -1.0)
    pts[np.arange(n), axis] = sign * half[axis]
    return pts + np.asarray(center)


def _triangles(rng, n, tris: np.ndarray) -> np.ndarray:
    a, b, c = tris[:, 0], tris[:, 1], tris[:, 2]
    areas = 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)
    which = _pick_pieces(rng, n, areas)
    r1 = np.sqrt(rng.random(n))[:, None]
    r2 = rng.random(n)[:, None]
    return (1 - r1) * a[which] + r1 * (1 - r2) * b[which] + r1 * r2 * c[which]


def _disk(rng, n, radius, z) -> np.ndarray:
    rad = radius * np.sqrt(rng.random(n))
    theta = rng.uniform(0.0, 2 * np.pi, n)
    return np.column_stack([rad * np.cos(theta), rad * np.sin(theta), np.full(n, z)])


def _sphere(rng, n, p):
    return p["radius"] * _unit_vectors(rng, n)


def _cube(rng, n, p):
    return _box_surface(rng, n, [p["half"]] * 3)


def _cylinder(rng, n, p):
    r, h = p["radius"], p["height"]
    piece = _pick_pieces(rng, n, [2 * np.pi * r * h, np.pi * r * r, np.pi * r * r])
    pts = np.empty((n, 3))
    side = piece == 0
    theta = rng.uniform(0.0, 2 * np.pi, side.sum())
    pts[side] = np.column_stack([r * np.cos(theta), r * np.sin(theta), rng.uniform(-h / 2, h / 2, side.sum())])
    for cap, z in ((1, h / 2), (2, -h / 2)):
        sel = piece == cap
        pts[sel] = _disk(rng, sel.sum(), r, z)
    return pts


def _torus(rng, n, p):
    big, small = p["major"], p["minor"]
    out = np.empty((0, 3))
    # rejection on the tube angle gives area-uniform samples
    while len(out) < n:
        m = 2 * (n - len(out)) + 16
        theta = rng.uniform(0.0, 2 * np.pi, m)
        phi = rng.uniform(0.0, 2 * np.pi, m)
        keep = rng.random(m) < (big + small * np.cos(phi)) / (big + small)
        theta, phi = theta[keep], phi[keep]
        ring = big + small * np.cos(phi)
        out = np.vstack([out, np.column_stack([ring * np.cos(theta), ring * np.sin(theta), small * np.sin(phi)])])
    return out[:n]


def _cone(rng, n, p):
    r, h = p["radius"], p["height"]
    slant = math.hypot(r, h)
    piece = _pick_pieces(rng, n, [np.pi * r * slant, np.pi * r * r])
    pts = np.empty((n, 3))
    side = piece == 0
    t = np.sqrt(rng.random(side.sum()))
    theta = rng.uniform(0.0, 2 * np.pi, side.sum())
    pts[side] = np.column_stack([t * r * np.cos(theta), t * r * np.sin(theta), h / 2 - t * h])
    pts[~side] = _disk(rng, (~side).sum(), r, -h / 2)
    return pts


def _capsule(rng, n, p):
    r, h = p["radius"], p["height"]
    piece = _pick_pieces(rng, n, [2 * np.pi * r * h, 4 * np.pi * r * r])
    pts = np.empty((n, 3))
    side = piece == 0
    theta = rng.uniform(0.0, 2 * np.pi, side.sum())
    pts[side] = np.column_stack([r * np.cos(theta), r * np.sin(theta), rng.uniform(-h / 2, h / 2, side.sum())])
    caps = r * _unit_vectors(rng, (~side).sum())
    caps[:, 2] += np.where(caps[:, 2] >= 0, h / 2, -h / 2)
    pts[~side] = caps
    return pts


def _cross(rng, n, p):
    length, thick = p["half_length"], p["thickness"] / 2
    bars = [np.roll([length, thick, thick], axis) for axis in range(3)]

    def inside_other(pts, own):
        hit = np.zeros(len(pts), dtype=bool)
        for j, half in enumerate(bars):
            if j != own:
                hit |= np.all(np.abs(pts) < half, axis=1)
        return hit

    areas = [2 * (4 * b[1] * b[2] + 4 * b[0] * b[2] + 4 * b[0] * b[1]) for b in bars]
    out = np.empty((0, 3))
    # points hidden inside another bar are not on the union's surface
    while len(out) < n:
        m = 2 * (n - len(out)) + 16
        bar = _pick_pieces(rng, m, areas)
        for j, half in enumerate(bars):
            cand = _box_surface(rng, int((bar == j).sum()), half)
            out = np.vstack([out, cand[~inside_other(cand, j)]])
    return out[:n]


def _pyramid(rng, n, p):
    b, h = p["half_base"], p["height"]
    apex = np.array([0.0, 0.0, h / 2])
    base = np.array([[b, b, -h / 2], [-b, b, -h / 2], [-b, -b, -h / 2], [b, -b, -h / 2]])
    tris = [[base[i], base[(i + 1) % 4], apex] for i in range(4)]
    tris += [[base[0], base[1], base[2]], [base[0], base[2], base[3]]]
    return _triangles(rng, n, np.asarray(tris))


_SAMPLERS = {
    "sphere": _sphere, "cube": _cube, "cylinder": _cylinder, "torus": _torus,
    "cone": _cone, "capsule": _capsule, "cross": _cross, "pyramid": _pyramid,
}


def draw_shape_params(class_name: str, rng: np.random.Generator) -> dict[str, float]:
    return {key: float(rng.uniform(lo, hi)) for key, (lo, hi) in SHAPE_RANGES[class_name].items()}


def sample_synthetic(spec: SyntheticSpec) -> PointCloud:
    """Surface samples of one synthetic shape, labelled with its class id."""
    rng = np.random.default_rng(spec.seed)
    params = spec.shape_params or draw_shape_params(spec.class_name, rng)
    missing = set(SHAPE_RANGES[spec.class_name]) - set(params)
    if missing:
        raise ConfigError(f"{spec.class_name}: missing shape parameters {sorted(missing)}")
    points = _SAMPLERS[spec.class_name](rng, spec.n_points, params)
    return PointCloud(points, label=spec.class_id)


def augment(cloud: PointCloud, params: AugmentParams, rng: np.random.Generator) -> PointCloud:
    """Rotate, then scale each axis, then add clipped Gaussian jitter."""
    pts = cloud.points
    if params.rotation == "z":
        theta = rng.uniform(0.0, 2 * np.pi)
        c, s = math.cos(theta), math.sin(theta)
        pts = pts @ np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]).T
    elif params.rotation == "so3":
        pts = Rotation.random(random_state=rng).apply(pts)
    if (params.scale_lo, params.scale_hi) != (1.0, 1.0):
        pts = pts * rng.uniform(params.scale_lo, params.scale_hi, size=3)
    if params.jitter_sigma > 0:
        noise = params.jitter_sigma * rng.standard_normal(pts.shape)
        pts = pts + np.clip(noise, -params.jitter_clip, params.jitter_clip)
    return replace(cloud, points=pts)


def load_points(path) -> PointCloud:
    path = Path(path)
    rows = []
    with path.open() as fh:
        for line_no, line in enumerate(fh, start=1):
            fields = line.split()
            if not fields:
                continue
            if len(fields) != 3:
                raise ParseError(path, line_no, f"expected 3 columns, got {len(fields)}")
            try:
                rows.append([float(x) for x in fields])
            except ValueError:
                raise ParseError(path, line_no, f"malformed coordinates {line.strip()!r}") from None
    if not rows:
        raise ParseError(path, 0, "no points")
    try:
        return PointCloud(np.array(rows))
    except DataError as exc:
        raise ParseError(path, 0, str(exc)) from None


def save_points(cloud: PointCloud, path):
    path = Path(path)
    np.savetxt(path, cloud.points, fmt="%.9g", delimiter=" ")
