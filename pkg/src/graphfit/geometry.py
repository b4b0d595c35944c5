"""Patch extraction, canonical frames, and closed-form weighted n-jet fitting.

A patch is the query point plus its k nearest neighbours, translated so the
query sits at the origin, scaled to unit radius and rotated into the PCA frame
of the raw neighbourhood (smallest-variance axis on +z). Height-function fits
happen in that frame; :class:`LocalFrame` maps results back to world space.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import scipy.linalg
from scipy.spatial import cKDTree

from .errors import ConditioningError, DegeneracyError, SizeError

WEIGHT_FLOOR = 1e-4
OFFSET_LIMIT = 0.25


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray
    normals: np.ndarray | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        object.__setattr__(self, "points", pts)
        if self.normals is not None:
            nrm = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
            if len(nrm) != len(pts):
                raise SizeError(f"{len(pts)} points but {len(nrm)} normals")
            object.__setattr__(self, "normals", nrm)

    def __len__(self):
        return len(self.points)

    @property
    def bbox_diagonal(self) -> float:
        if len(self.points) == 0:
            return 0.0
        return float(np.linalg.norm(self.points.max(axis=0) - self.points.min(axis=0)))

    def with_points(self, points, normals=None) -> "PointCloud":
        return PointCloud(points, self.normals if normals is None else normals)


@dataclass(frozen=True)
class LocalFrame:
    """World -> canonical map ``local = rotation @ (p - translation) / scale``."""

    rotation: np.ndarray
    translation: np.ndarray
    scale: float

    @classmethod
    def identity(cls) -> "LocalFrame":
        return cls(np.eye(3), np.zeros(3), 1.0)

    def to_local(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points) - self.translation) @ self.rotation.T / self.scale

    def to_world(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points) * self.scale @ self.rotation + self.translation

    def direction_to_world(self, v: np.ndarray) -> np.ndarray:
        return np.asarray(v) @ self.rotation

    def direction_to_local(self, v: np.ndarray) -> np.ndarray:
        return np.asarray(v) @ self.rotation.T


@dataclass(frozen=True)
class Patch:
    query_index: int
    local_points: np.ndarray
    frame: LocalFrame
    source_indices: np.ndarray

    def __len__(self):
        return len(self.local_points)

    @classmethod
    def from_local(cls, points, frame: LocalFrame | None = None) -> "Patch":
        """Wrap points that are already in a canonical frame (row 0 is the query)."""
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        return cls(0, pts, frame or LocalFrame.identity(), np.arange(len(pts)))


@dataclass(frozen=True)
class JetOrder:
    n: int

    def __post_init__(self):
        if int(self.n) != self.n or self.n < 1:
            raise ValueError(f"jet order must be an integer >= 1, got {self.n}")

    @property
    def term_count(self) -> int:
        return (self.n + 1) * (self.n + 2) // 2


@dataclass(frozen=True)
class JetCoefficients:
    beta: np.ndarray
    order: JetOrder
    regularized: bool = False

    def __len__(self):
        return len(self.beta)


def _as_order(order) -> JetOrder:
    return order if isinstance(order, JetOrder) else JetOrder(int(order))


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


# --------------------------------------------------------------------------
# neighbourhoods


class NeighborSearch:
    """k-NN over a fixed cloud with distance ties broken by ascending index."""

    def __init__(self, points: np.ndarray):
        self.points = np.asarray(points, dtype=np.float64)
        self.tree = cKDTree(self.points)

    def query(self, q: np.ndarray, k: int) -> np.ndarray:
        n = len(self.points)
        if not 1 <= k <= n:
            raise SizeError(f"need 1 <= k <= {n}, got k={k}")
        extra = min(n, k + 8)
        while True:
            _, cand = self.tree.query(q, k=extra)
            cand = np.atleast_1d(cand)
            d2 = ((self.points[cand] - q) ** 2).sum(axis=1)
            order = np.lexsort((cand, d2))
            cand, d2 = cand[order], d2[order]
            # a tie straddling the cut may hide candidates beyond `extra`
            if extra == n or d2[k - 1] < d2[-1]:
                return cand[:k]
            extra = min(n, 2 * extra)


def pca_frame(points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Eigenvalues (descending) and a right-handed rotation whose rows are the
    principal axes, largest variance first."""
    centered = points - points.mean(axis=0)
    cov = centered.T @ centered / len(points)
    evals, evecs = np.linalg.eigh(cov)
    evals, evecs = evals[::-1], evecs[:, ::-1]
    rot = evecs.T.copy()
    if np.linalg.det(rot) < 0:
        rot[1] = -rot[1]
    return evals, rot


def extract_patch(cloud: PointCloud, query: int, k: int, search: NeighborSearch | None = None) -> Patch:
    """Canonicalized k-nearest-neighbour patch around ``cloud.points[query]``."""
    n = len(cloud)
    if not 1 <= k <= n:
        raise SizeError(f"cloud of {n} points is too small for k={k}")
    if not 0 <= query < n:
        raise IndexError(f"query index {query} out of range for {n} points")
    search = search or NeighborSearch(cloud.points)
    q = cloud.points[query]
    idx = search.query(q, k)
    raw = cloud.points[idx]
    offsets = raw - q
    scale = float(np.linalg.norm(offsets, axis=1).max())
    if scale <= 0.0 or not np.isfinite(scale):
        raise DegeneracyError(f"patch around point {query} has all points coincident")
    _, rot = pca_frame(raw)
    frame = LocalFrame(rot, q.copy(), scale)
    return Patch(int(query), offsets @ rot.T / scale, frame, idx)


# --------------------------------------------------------------------------
# baselines


def pca_normal(patch: Patch) -> np.ndarray:
    """Smallest-eigenvalue direction of the patch covariance, world frame."""
    evals, rot = pca_frame(patch.local_points)
    if evals[1] <= 1e-12 * max(evals[0], 1e-300):
        raise DegeneracyError("collinear patch: covariance has rank < 2")
    normal = rot[2]
    if normal[2] < 0:
        normal = -normal
    return _unit(patch.frame.direction_to_world(normal))


@lru_cache(maxsize=None)
def monomial_exponents(n: int) -> tuple[tuple[int, int], ...]:
    """(x power, y power) per Vandermonde column: graded, x power descending."""
    return tuple((k - j, j) for k in range(n + 1) for j in range(k + 1))


def build_vandermonde(xy, order) -> np.ndarray:
    order = _as_order(order)
    xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
    if not np.isfinite(xy).all():
        raise ValueError("non-finite coordinates")
    x, y = xy[:, 0:1], xy[:, 1:2]
    ex = np.array(monomial_exponents(order.n))
    return x ** ex[:, 0] * y ** ex[:, 1]


def vandermonde_partials(xy, order) -> tuple[np.ndarray, np.ndarray]:
    """Analytic d/dx and d/dy of every Vandermonde entry."""
    order = _as_order(order)
    xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
    if not np.isfinite(xy).all():
        raise ValueError("non-finite coordinates")
    x, y = xy[:, 0:1], xy[:, 1:2]
    ex = np.array(monomial_exponents(order.n))
    a, b = ex[:, 0], ex[:, 1]
    dx = a * x ** np.maximum(a - 1, 0) * y ** b
    dy = b * x ** a * y ** np.maximum(b - 1, 0)
    return dx, dy


def ridge_lambda(normal_matrix: np.ndarray) -> float:
    return 1e-9 * float(np.trace(normal_matrix)) / normal_matrix.shape[-1]


def solve_normal_equations(lhs: np.ndarray, rhs: np.ndarray) -> tuple[np.ndarray, bool]:
    """Cholesky solve with one ridge retry. Returns (solution, regularized)."""
    try:
        return scipy.linalg.cho_solve(scipy.linalg.cho_factor(lhs, lower=True), rhs), False
    except np.linalg.LinAlgError:
        pass
    ridged = lhs + ridge_lambda(lhs) * np.eye(lhs.shape[0])
    try:
        return scipy.linalg.cho_solve(scipy.linalg.cho_factor(ridged, lower=True), rhs), True
    except np.linalg.LinAlgError as exc:
        raise ConditioningError("weighted jet system is singular even after ridge") from exc


def solve_weighted_jet(patch: Patch, order, weights=None, offsets=None,
                       weight_floor: float = WEIGHT_FLOOR) -> JetCoefficients:
    """beta = (M^T W M)^{-1} M^T W z on offset-shifted canonical points.

    ``weights`` must be strictly positive and at least ``weight_floor``;
    ``offsets`` are clamped to +-OFFSET_LIMIT per component.
    """
    order = _as_order(order)
    pts = np.asarray(patch.local_points, dtype=np.float64)
    n_p = len(pts)
    if n_p < order.term_count:
        raise SizeError(f"order {order.n} needs >= {order.term_count} points, patch has {n_p}")
    w = np.ones(n_p) if weights is None else np.asarray(weights, dtype=np.float64).reshape(-1)
    if len(w) != n_p:
        raise SizeError(f"{len(w)} weights for {n_p} points")
    if not np.isfinite(w).all() or (w <= 0).any() or (w < weight_floor).any():
        raise ValueError(f"weights must be finite and >= {weight_floor} (and > 0)")
    if offsets is not None:
        off = np.asarray(offsets, dtype=np.float64).reshape(n_p, 3)
        if not np.isfinite(off).all():
            raise ValueError("non-finite offsets")
        pts = pts + np.clip(off, -OFFSET_LIMIT, OFFSET_LIMIT)
    m = build_vandermonde(pts[:, :2], order)
    mw = m * w[:, None]
    beta, regularized = solve_normal_equations(mw.T @ m, mw.T @ pts[:, 2])
    return JetCoefficients(beta, order, regularized)


def canonical_jet_normal(beta: np.ndarray) -> np.ndarray:
    beta = np.asarray(beta)
    return _unit(np.array([-beta[1], -beta[2], 1.0]))


def jet_normal(beta: JetCoefficients | np.ndarray, frame: LocalFrame) -> np.ndarray:
    """Normal of the height function at the origin, mapped to world frame."""
    b = beta.beta if isinstance(beta, JetCoefficients) else np.asarray(beta)
    return _unit(frame.direction_to_world(canonical_jet_normal(b)))


def neighbor_normals(beta: JetCoefficients | np.ndarray, patch: Patch, order=None,
                     points: np.ndarray | None = None) -> np.ndarray:
    """Unit gradients of F = J(x, y) - z at each patch point, world frame.

    ``points`` overrides where F is evaluated (canonical coordinates), e.g. at
    offset-shifted positions.
    """
    if isinstance(beta, JetCoefficients):
        order = beta.order if order is None else order
        beta = beta.beta
    order = _as_order(order)
    pts = patch.local_points if points is None else np.asarray(points)
    dx, dy = vandermonde_partials(pts[:, :2], order)
    grad = np.stack([-(dx @ beta), -(dy @ beta), np.ones(len(pts))], axis=1)
    return _unit(patch.frame.direction_to_world(_unit(grad)))


def classical_jet_normal(patch: Patch, order) -> np.ndarray:
    """Unweighted, zero-offset jet fit followed by :func:`jet_normal`."""
    n_p = len(patch)
    coeffs = solve_weighted_jet(patch, order, np.ones(n_p), np.zeros((n_p, 3)))
    return jet_normal(coeffs, patch.frame)


@dataclass
class CloudPatcher:
    """Reusable patch extraction over one cloud (one spatial index)."""

    cloud: PointCloud
    k: int
    search: NeighborSearch = field(init=False)

    def __post_init__(self):
        if not 1 <= self.k <= len(self.cloud):
            raise SizeError(f"cloud of {len(self.cloud)} points is too small for k={self.k}")
        self.search = NeighborSearch(self.cloud.points)

    def __call__(self, query: int) -> Patch:
        return extract_patch(self.cloud, query, self.k, self.search)


def estimate_baseline(cloud: PointCloud, method: str, k: int, order=2, queries=None) -> np.ndarray:
    """PCA or classical-jet normals at ``queries`` (default: every point)."""
    patcher = CloudPatcher(cloud, k)
    queries = range(len(cloud)) if queries is None else queries
    out = []
    for q in queries:
        patch = patcher(int(q))
        if method == "pca":
            out.append(pca_normal(patch))
        elif method == "jet":
            out.append(classical_jet_normal(patch, order))
        else:
            raise ValueError(f"unknown baseline method {method!r}")
    return np.array(out).reshape(-1, 3)
