"""Unoriented normal metrics, method comparison, denoising and heatmap export."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .data import NOISE_PRESETS, AugmentationSpec, ShapeRecord, apply_augmentation
from .errors import ConfigurationError, SizeError
from .geometry import CloudPatcher, PointCloud, estimate_baseline
from .network import GraphFitModel, estimate_normals_batch

# (key, table label, augmentation) in the benchmark's row order
CATEGORIES = (
    ("noiseless", "w/o Noise", AugmentationSpec()),
    ("noise_low", "sigma = 0.125%", AugmentationSpec(NOISE_PRESETS["low"])),
    ("noise_medium", "sigma = 0.6%", AugmentationSpec(NOISE_PRESETS["medium"])),
    ("noise_high", "sigma = 1.2%", AugmentationSpec(NOISE_PRESETS["high"])),
    ("gradient", "Gradient", AugmentationSpec(density_mode="gradient")),
    ("striped", "Striped", AugmentationSpec(density_mode="striped")),
)
CATEGORY_LABELS = {key: label for key, label, _ in CATEGORIES} | {"average": "Average"}
PGP_ALPHAS = (5.0, 10.0)


def angle_between(n_hat, n_gt) -> np.ndarray:
    """Unoriented angle in radians: arccos(clamp(|<n_hat, n_gt>|, 0, 1))."""
    a = np.asarray(n_hat, dtype=np.float64)
    b = np.asarray(n_gt, dtype=np.float64)
    dots = np.abs((a * b).sum(axis=-1))
    return np.arccos(np.clip(dots, 0.0, 1.0))


def _angles(pred, gt) -> np.ndarray:
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, 3)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 3)
    if len(pred) != len(gt):
        raise SizeError(f"{len(pred)} predictions for {len(gt)} ground-truth normals")
    if len(pred) == 0:
        raise SizeError("metrics need at least one normal pair")
    return angle_between(pred, gt)


def rmse_angles(pred, gt) -> float:
    """Root-mean-square unoriented angle error, in degrees."""
    return float(np.degrees(np.sqrt(np.mean(_angles(pred, gt) ** 2))))


def pgp(pred, gt, alpha: float) -> float:
    """Fraction of pairs whose angle is strictly below ``alpha`` degrees."""
    if not 0 < alpha <= 180:
        raise ValueError(f"alpha must lie in (0, 180], got {alpha}")
    return float(np.mean(np.degrees(_angles(pred, gt)) < alpha))


@dataclass
class MetricsRow:
    category: str
    rmse_deg: float
    pgp: dict[float, float]

    @property
    def label(self) -> str:
        return CATEGORY_LABELS.get(self.category, self.category)


@dataclass
class MetricsReport:
    method: str
    shape_count: int
    rows: list[MetricsRow] = field(default_factory=list)

    def row(self, category: str) -> MetricsRow:
        for r in self.rows:
            if r.category == category:
                return r
        raise KeyError(category)


@dataclass
class Comparison:
    reports: list[MetricsReport]

    def records(self) -> list[dict]:
        out = []
        for rep in self.reports:
            for row in rep.rows:
                out.append({"method": rep.method, "augmentation": row.category, "rmse_deg": row.rmse_deg,
                            "pgp5": row.pgp.get(5.0), "pgp10": row.pgp.get(10.0)})
        return out

    def table(self) -> str:
        methods = [r.method for r in self.reports]
        cats = [row.category for row in self.reports[0].rows] if self.reports else []
        width = max([len(m) for m in methods] + [10])
        lines = []
        for title, pick in (("RMSE (deg)", lambda r: f"{r.rmse_deg:.2f}"),
                            ("PGP(5)", lambda r: f"{r.pgp[5.0]:.4f}"),
                            ("PGP(10)", lambda r: f"{r.pgp[10.0]:.4f}")):
            lines.append(f"{title:<16s}" + "".join(f"{m:>{width + 2}s}" for m in methods))
            for cat in cats:
                cells = "".join(f"{pick(rep.row(cat)):>{width + 2}s}" for rep in self.reports)
                lines.append(f"{CATEGORY_LABELS.get(cat, cat):<16s}{cells}")
            lines.append("")
        return "\n".join(lines).rstrip() + "\n"

    def write(self, table_path, records_path=None) -> None:
        Path(table_path).write_text(self.table(), encoding="utf-8")
        records_path = records_path or Path(str(table_path) + ".jsonl")
        with open(records_path, "w", encoding="utf-8") as fh:
            for rec in self.records():
                fh.write(json.dumps(rec) + "\n")


def _resolve_method(method):
    """-> (display name, callable(cloud, queries) -> normals)."""
    if isinstance(method, GraphFitModel):
        model = method
        name = "graphfit"
    elif isinstance(method, tuple):
        name, model = method
    elif method in ("pca", "jet"):
        return method, None
    else:
        path = Path(str(method))
        if not path.exists():
            raise ConfigurationError(f"checkpoint {path} does not exist")
        from .training import load_checkpoint
        model = load_checkpoint(path).build_model()
        name = path.stem
    return name, model


def estimate_cloud_normals(method, cloud: PointCloud, queries, k: int = 256, jet_order: int = 3) -> np.ndarray:
    """Normals at ``queries`` using ``pca``, ``jet`` or a trained model."""
    if isinstance(method, GraphFitModel):
        patcher = CloudPatcher(cloud, method.config.patch_size)
        return estimate_normals_batch(method, [patcher(int(q)) for q in queries])
    return estimate_baseline(cloud, method, k, jet_order, queries)


def compare_methods(shapes: list[ShapeRecord], methods, augmentations=None, k: int = 256,
                    jet_order: int = 3, queries_per_shape: int | None = None, seed: int = 0) -> Comparison:
    """RMSE and PGP(5/10) per augmentation category and method.

    Per-shape metrics are averaged over shapes. With more than one category an
    ``average`` row (mean over the category rows) closes each report.
    """
    if not shapes:
        raise ConfigurationError("no shapes to evaluate")
    resolved = [_resolve_method(m) for m in methods]
    wanted = [c for c in CATEGORIES if augmentations is None or c[0] in augmentations]
    if augmentations is not None and len(wanted) != len(set(augmentations)):
        known = [c[0] for c in CATEGORIES]
        raise ConfigurationError(f"unknown augmentation in {augmentations}; known: {known}")
    per_method: dict[str, list[MetricsRow]] = {name: [] for name, _ in resolved}
    for ci, (key, _, aug) in enumerate(wanted):
        per_shape: dict[str, list[tuple[float, dict]]] = {name: [] for name, _ in resolved}
        for si, shape in enumerate(shapes):
            if shape.cloud.normals is None:
                raise ConfigurationError(f"shape {shape.name} has no ground-truth normals")
            spec = AugmentationSpec(aug.gaussian_sigma_rel, aug.density_mode, seed + 7919 * si + ci)
            cloud, survivors = apply_augmentation(shape.cloud, spec)
            queries = _pick_queries(shape, survivors, queries_per_shape, seed + si)
            gt = cloud.normals[queries]
            for name, model in resolved:
                pred = estimate_cloud_normals(model if model is not None else name, cloud, queries, k, jet_order)
                per_shape[name].append((rmse_angles(pred, gt), {a: pgp(pred, gt, a) for a in PGP_ALPHAS}))
        for name, vals in per_shape.items():
            per_method[name].append(MetricsRow(
                key, float(np.mean([v[0] for v in vals])),
                {a: float(np.mean([v[1][a] for v in vals])) for a in PGP_ALPHAS}))
    reports = []
    for name, rows in per_method.items():
        if len(rows) > 1:
            rows.append(MetricsRow("average", float(np.mean([r.rmse_deg for r in rows])),
                                   {a: float(np.mean([r.pgp[a] for r in rows])) for a in PGP_ALPHAS}))
        reports.append(MetricsReport(name, len(shapes), rows))
    return Comparison(reports)


def _pick_queries(shape: ShapeRecord, survivors: np.ndarray, limit: int | None, seed: int) -> np.ndarray:
    """Query positions in the augmented cloud."""
    if shape.query_indices is not None:
        position = {int(orig): i for i, orig in enumerate(survivors)}
        queries = np.array([position[q] for q in shape.query_indices if int(q) in position], dtype=np.int64)
    else:
        queries = np.arange(len(survivors))
    if limit is not None and len(queries) > limit:
        queries = np.sort(np.random.default_rng(seed).choice(queries, limit, replace=False))
    if len(queries) == 0:
        raise SizeError(f"no query points survive augmentation on {shape.name}")
    return queries


# --------------------------------------------------------------------------
# denoising


@dataclass(frozen=True)
class DenoiseConfig:
    gamma: float = 0.05
    iterations: int = 10
    k: int = 8

    def __post_init__(self):
        if not self.gamma >= 0:
            raise ValueError("gamma must be >= 0")
        if self.iterations < 1 or self.k < 1:
            raise ValueError("iterations and k must be >= 1")


def _neighbors_excluding_self(points: np.ndarray, k: int) -> np.ndarray:
    n = len(points)
    if k >= n:
        raise SizeError(f"denoising needs more than k={k} points, got {n}")
    _, idx = cKDTree(points).query(points, k=k + 1)
    rows = np.arange(n)[:, None]
    is_self = idx == rows
    # drop self where found, otherwise drop the farthest candidate
    drop = np.where(is_self.any(axis=1), is_self.argmax(axis=1), k)
    keep = np.ones_like(idx, dtype=bool)
    keep[np.arange(n), drop] = False
    return idx[keep].reshape(n, k)


def denoise_step(points: np.ndarray, normals: np.ndarray, gamma: float, k: int) -> np.ndarray:
    """p_i + gamma * sum_j (n_i n_i^T + n_j n_j^T)(p_j - p_i) over the k-NN of p_i."""
    idx = _neighbors_excluding_self(points, k)
    diff = points[idx] - points[:, None, :]
    ni = normals[:, None, :]
    nj = normals[idx]
    along_i = (diff * ni).sum(axis=-1, keepdims=True) * ni
    along_j = (diff * nj).sum(axis=-1, keepdims=True) * nj
    return points + gamma * (along_i + along_j).sum(axis=1)


def denoise(cloud: PointCloud, config: DenoiseConfig = DenoiseConfig()) -> PointCloud:
    """Move points along the normal directions toward their neighbours.

    Normals stay fixed; neighbourhoods are recomputed every iteration.
    """
    if cloud.normals is None:
        raise ConfigurationError("denoising needs normals")
    normals = cloud.normals / np.linalg.norm(cloud.normals, axis=1, keepdims=True)
    points = cloud.points.copy()
    if config.gamma == 0:
        return PointCloud(points, cloud.normals)
    for _ in range(config.iterations):
        points = denoise_step(points, normals, config.gamma, config.k)
    return PointCloud(points, cloud.normals)


# --------------------------------------------------------------------------
# heatmap export


def error_color(angle_deg) -> np.ndarray:
    """Blue (0 deg) -> green (30 deg) -> red (>= 60 deg), linear per segment."""
    t = np.clip(np.asarray(angle_deg, dtype=np.float64) / 60.0, 0.0, 1.0)
    low = t <= 0.5
    r = np.where(low, 0.0, 2.0 * t - 1.0)
    g = np.where(low, 2.0 * t, 2.0 - 2.0 * t)
    b = np.where(low, 1.0 - 2.0 * t, 0.0)
    return np.rint(np.stack([r, g, b], axis=-1) * 255).astype(np.int64)


def export_error_heatmap(cloud: PointCloud, pred, gt, path) -> np.ndarray:
    """Write ``x y z r g b`` lines colored by unoriented angle error."""
    pred = np.asarray(pred).reshape(-1, 3)
    gt = np.asarray(gt).reshape(-1, 3)
    if not len(cloud) == len(pred) == len(gt):
        raise SizeError("cloud, predictions and ground truth differ in length")
    colors = error_color(np.degrees(angle_between(pred, gt)))
    with open(path, "w", encoding="utf-8") as fh:
        for p, c in zip(cloud.points, colors):
            fh.write(f"{p[0]:.17g} {p[1]:.17g} {p[2]:.17g} {c[0]} {c[1]} {c[2]}\n")
    return colors
