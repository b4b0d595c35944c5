"""PCPNet-style file I/O, augmentation, patch sampling and synthetic shapes.

File conventions: ``<name>.xyz`` and ``<name>.normals`` hold one
whitespace-separated triple per line, ``<name>.pidx`` one integer index per
line, and a shape list names one shape per line (files are siblings of the
list).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import BoundsError, ConfigurationError, ParseError, SizeError
from .geometry import PointCloud

NOISE_PRESETS = {"low": 0.00125, "medium": 0.006, "high": 0.012}
DENSITY_MODES = ("none", "gradient", "striped")

GRADIENT_NEAR_KEEP = 1.0
GRADIENT_FAR_KEEP = 0.1
STRIPE_BANDS = 8
STRIPE_KEEP = 0.15


@dataclass
class ShapeRecord:
    name: str
    cloud: PointCloud
    tags: tuple = ()
    query_indices: np.ndarray | None = None

    def __post_init__(self):
        if self.cloud.normals is not None and len(self.cloud.normals) != len(self.cloud.points):
            raise SizeError(f"{self.name}: points and normals differ in count")


@dataclass(frozen=True)
class AugmentationSpec:
    gaussian_sigma_rel: float = 0.0
    density_mode: str = "none"
    seed: int = 0

    def __post_init__(self):
        if not self.gaussian_sigma_rel >= 0:
            raise ValueError(f"sigma must be >= 0, got {self.gaussian_sigma_rel}")
        if self.density_mode not in DENSITY_MODES:
            raise ValueError(f"density_mode must be one of {DENSITY_MODES}")


# --------------------------------------------------------------------------
# readers / writers


def _read_rows(path, width: int, kind=float) -> list:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            tokens = line.split()
            if not tokens:
                continue
            if len(tokens) != width:
                raise ParseError(f"expected {width} values, found {len(tokens)}", lineno, path)
            try:
                values = [kind(t) for t in tokens]
            except ValueError:
                raise ParseError(f"cannot parse {line.strip()!r}", lineno, path) from None
            if kind is float and not all(math.isfinite(v) for v in values):
                raise ParseError("non-finite value", lineno, path)
            rows.append(values)
    return rows


def read_xyz(path) -> np.ndarray:
    return np.array(_read_rows(path, 3), dtype=np.float64).reshape(-1, 3)


def read_normals(path) -> np.ndarray:
    return np.array(_read_rows(path, 3), dtype=np.float64).reshape(-1, 3)


def read_pidx(path, cloud_size: int | None = None) -> np.ndarray:
    idx = np.array([r[0] for r in _read_rows(path, 1, int)], dtype=np.int64)
    if len(idx) and idx.min() < 0:
        raise BoundsError(f"{path}: negative point index")
    if cloud_size is not None and len(idx) and idx.max() >= cloud_size:
        raise BoundsError(f"{path}: index {idx.max()} out of range for {cloud_size} points")
    return idx


def _write_rows(path, rows: np.ndarray) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(" ".join(f"{v:.17g}" for v in row) + "\n")


def write_xyz(path, points) -> None:
    _write_rows(path, np.asarray(points, dtype=np.float64).reshape(-1, 3))


def write_normals(path, normals) -> None:
    _write_rows(path, np.asarray(normals, dtype=np.float64).reshape(-1, 3))


def write_pidx(path, indices) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for i in np.asarray(indices, dtype=np.int64).reshape(-1):
            fh.write(f"{i}\n")


def read_shape_list(path) -> list[str]:
    with open(path, encoding="utf-8") as fh:
        return [line.strip() for line in fh if line.strip() and not line.startswith("#")]


def load_shape(directory, name: str) -> ShapeRecord:
    base = Path(directory) / name
    xyz = base.with_name(name + ".xyz")
    if not xyz.exists():
        raise ConfigurationError(f"missing point file {xyz}")
    points = read_xyz(xyz)
    nrm_path = base.with_name(name + ".normals")
    normals = read_normals(nrm_path) if nrm_path.exists() else None
    if normals is not None and len(normals) != len(points):
        raise SizeError(f"{name}: {len(points)} points but {len(normals)} normals")
    pidx_path = base.with_name(name + ".pidx")
    pidx = read_pidx(pidx_path, len(points)) if pidx_path.exists() else None
    return ShapeRecord(name, PointCloud(points, normals), query_indices=pidx)


def load_shape_list(path) -> list[ShapeRecord]:
    path = Path(path)
    return [load_shape(path.parent, name) for name in read_shape_list(path)]


def save_shape(directory, shape: ShapeRecord) -> None:
    base = Path(directory)
    base.mkdir(parents=True, exist_ok=True)
    write_xyz(base / f"{shape.name}.xyz", shape.cloud.points)
    if shape.cloud.normals is not None:
        write_normals(base / f"{shape.name}.normals", shape.cloud.normals)
    if shape.query_indices is not None:
        write_pidx(base / f"{shape.name}.pidx", shape.query_indices)


# --------------------------------------------------------------------------
# augmentation


def add_gaussian_noise(cloud: PointCloud, sigma_rel: float, seed: int = 0) -> PointCloud:
    """i.i.d. N(0, (sigma_rel * bbox diagonal)^2) per coordinate; normals untouched."""
    if not sigma_rel >= 0:
        raise ValueError(f"sigma_rel must be >= 0, got {sigma_rel}")
    if sigma_rel == 0:
        return PointCloud(cloud.points.copy(), cloud.normals)
    sigma = sigma_rel * cloud.bbox_diagonal
    rng = np.random.default_rng(seed)
    return PointCloud(cloud.points + rng.normal(0.0, sigma, cloud.points.shape), cloud.normals)


def _longest_axis_coordinate(points: np.ndarray) -> np.ndarray:
    """Position of each point along the longest bbox axis, scaled to [0, 1]."""
    lo, hi = points.min(axis=0), points.max(axis=0)
    axis = int(np.argmax(hi - lo))
    extent = hi[axis] - lo[axis]
    if extent <= 0:
        return np.zeros(len(points))
    return (points[:, axis] - lo[axis]) / extent


def gradient_keep_probability(points: np.ndarray, near: float = GRADIENT_NEAR_KEEP,
                              far: float = GRADIENT_FAR_KEEP) -> np.ndarray:
    t = _longest_axis_coordinate(points)
    return near + (far - near) * t


def striped_keep_probability(points: np.ndarray, bands: int = STRIPE_BANDS,
                             keep: float = STRIPE_KEEP) -> np.ndarray:
    t = _longest_axis_coordinate(points)
    band = np.minimum((t * bands).astype(np.int64), bands - 1)
    return np.where(band % 2 == 1, keep, 1.0)


def density_mask(cloud: PointCloud, mode: str, seed: int = 0) -> np.ndarray:
    """Boolean survivor mask for a density augmentation."""
    if len(cloud) == 0:
        raise SizeError("density augmentation needs a non-empty cloud")
    if mode == "none":
        return np.ones(len(cloud), dtype=bool)
    if mode == "gradient":
        prob = gradient_keep_probability(cloud.points)
    elif mode == "striped":
        prob = striped_keep_probability(cloud.points)
    else:
        raise ValueError(f"unknown density mode {mode!r}")
    return np.random.default_rng(seed).random(len(cloud)) < prob


def _subset(cloud: PointCloud, mask: np.ndarray) -> PointCloud:
    normals = None if cloud.normals is None else cloud.normals[mask]
    return PointCloud(cloud.points[mask], normals)


def density_gradient(cloud: PointCloud, seed: int = 0) -> PointCloud:
    return _subset(cloud, density_mask(cloud, "gradient", seed))


def density_striped(cloud: PointCloud, seed: int = 0) -> PointCloud:
    return _subset(cloud, density_mask(cloud, "striped", seed))


def apply_augmentation(cloud: PointCloud, spec: AugmentationSpec) -> tuple[PointCloud, np.ndarray]:
    """Noise then density thinning; returns the cloud and survivor indices."""
    noisy = add_gaussian_noise(cloud, spec.gaussian_sigma_rel, spec.seed)
    mask = density_mask(noisy, spec.density_mode, spec.seed + 1)
    return _subset(noisy, mask), np.flatnonzero(mask)


def add_uniform_outliers(cloud: PointCloud, fraction: float, seed: int = 0,
                         protect: np.ndarray | None = None) -> tuple[PointCloud, np.ndarray]:
    """Replace a fraction of points by uniform samples in the bounding box.

    Ground-truth normals stay attached to the replaced slots. ``protect`` lists
    indices that are never replaced. Returns the cloud and the outlier indices.
    """
    rng = np.random.default_rng(seed)
    candidates = np.arange(len(cloud))
    if protect is not None:
        candidates = np.setdiff1d(candidates, protect)
    count = int(round(fraction * len(cloud)))
    chosen = np.sort(rng.choice(candidates, size=min(count, len(candidates)), replace=False))
    lo, hi = cloud.points.min(axis=0), cloud.points.max(axis=0)
    pts = cloud.points.copy()
    pts[chosen] = rng.uniform(lo, hi, size=(len(chosen), 3))
    return PointCloud(pts, cloud.normals), chosen


# --------------------------------------------------------------------------
# patch sampling


@dataclass(frozen=True)
class PatchSample:
    shape_index: int
    query_index: int
    augmentation: AugmentationSpec = field(default_factory=AugmentationSpec)


def sample_training_patches(shapes: list[ShapeRecord], per_shape: int, seed: int,
                            augmentation: AugmentationSpec | None = None) -> list[PatchSample]:
    """Uniform seeded sample of query points per shape.

    Queries come from the shape's ``query_indices`` when present, otherwise
    from all points. Sampling is without replacement unless ``per_shape``
    exceeds the pool.
    """
    if per_shape < 1:
        raise ValueError("per_shape must be >= 1")
    rng = np.random.default_rng(seed)
    aug = augmentation or AugmentationSpec()
    samples = []
    for si, shape in enumerate(shapes):
        pool = shape.query_indices if shape.query_indices is not None else np.arange(len(shape.cloud))
        if len(pool) == 0:
            raise SizeError(f"shape {shape.name} has no query candidates")
        picks = rng.choice(pool, size=per_shape, replace=per_shape > len(pool))
        samples.extend(PatchSample(si, int(q), aug) for q in picks)
    return samples


# --------------------------------------------------------------------------
# synthetic shapes


def _sphere_directions(rng: np.random.Generator, count: int) -> np.ndarray:
    v = rng.normal(size=(count, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def synth_shape(kind: str, count: int, params: dict | None = None, seed: int = 0,
                name: str | None = None) -> ShapeRecord:
    """Uniform surface samples of an analytic shape with exact unit normals.

    kinds and params: ``plane`` (size: half extent of the square in z=0),
    ``sphere`` (radius), ``quadric`` z = a x^2 + b y^2 (a, b, size),
    ``cube`` (size: half edge length).
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    params = dict(params or {})
    rng = np.random.default_rng(seed)
    if kind == "plane":
        size = float(params.get("size", 1.0))
        if size <= 0:
            raise ValueError("plane size must be positive")
        xy = rng.uniform(-size, size, (count, 2))
        pts = np.column_stack([xy, np.zeros(count)])
        nrm = np.tile([0.0, 0.0, 1.0], (count, 1))
    elif kind == "sphere":
        radius = float(params.get("radius", 1.0))
        if radius <= 0:
            raise ValueError("sphere radius must be positive")
        nrm = _sphere_directions(rng, count)
        pts = radius * nrm
    elif kind == "quadric":
        a, b = float(params.get("a", 0.5)), float(params.get("b", 0.5))
        size = float(params.get("size", 1.0))
        if size <= 0:
            raise ValueError("quadric size must be positive")
        # rejection against the area element sqrt(1 + |grad|^2)
        bound = math.sqrt(1.0 + 4.0 * (a * a + b * b) * size * size)
        chunks, have = [], 0
        while have < count:
            xy = rng.uniform(-size, size, (2 * count, 2))
            dens = np.sqrt(1.0 + (2 * a * xy[:, 0]) ** 2 + (2 * b * xy[:, 1]) ** 2)
            xy = xy[rng.random(len(xy)) * bound < dens]
            chunks.append(xy)
            have += len(xy)
        xy = np.concatenate(chunks)[:count]
        z = a * xy[:, 0] ** 2 + b * xy[:, 1] ** 2
        pts = np.column_stack([xy, z])
        g = np.column_stack([-2 * a * xy[:, 0], -2 * b * xy[:, 1], np.ones(count)])
        nrm = g / np.linalg.norm(g, axis=1, keepdims=True)
    elif kind == "cube":
        size = float(params.get("size", 1.0))
        if size <= 0:
            raise ValueError("cube size must be positive")
        face = rng.integers(0, 6, count)
        axis, sign = face // 2, np.where(face % 2 == 0, 1.0, -1.0)
        pts = rng.uniform(-size, size, (count, 3))
        pts[np.arange(count), axis] = sign * size
        nrm = np.zeros((count, 3))
        nrm[np.arange(count), axis] = sign
    else:
        raise ValueError(f"unknown shape kind {kind!r}")
    return ShapeRecord(name or f"{kind}_{seed}", PointCloud(pts, nrm), tags=("synthetic", kind))
