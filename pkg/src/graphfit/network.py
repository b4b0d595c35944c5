"""The graph-convolutional weight/offset predictor and its differentiable jet fit.

Data flows patch -> spatial transform -> point convolutions -> feature
transform -> graph blocks (k-NN in feature space, edge MLP + max, optional
attention fusion and multi-scale layer) -> concatenated block outputs -> head
emitting one weight and three offsets per point. Weights and offsets feed the
closed-form weighted jet solve, differentiated through :func:`solve_spd`.

All layers run batched on (B, N, C) tensors.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields
import numpy as np

from . import autodiff as ad
from .autodiff import BatchNormState, Parameter, Tensor
from .errors import ConfigurationError, ShapeError, SizeError
from .geometry import (OFFSET_LIMIT, WEIGHT_FLOOR, JetOrder, Patch, monomial_exponents,
                       ridge_lambda)

LEAKY_SLOPE = 0.01


@dataclass(frozen=True)
class ModelConfig:
    jet_order: int = 3
    patch_size: int = 256
    point_conv_widths: tuple = (64, 64)
    graph_block_count: int = 2
    graph_block_widths: tuple = (128,)
    k1: int = 20
    k2: int = 10
    use_multi_scale: bool = True
    use_adaptive_module: bool = True
    head_widths: tuple = (256, 128)
    use_point_transform: bool = True
    use_feature_transform: bool = True
    transform_widths: tuple = (64, 128, 64)
    gate_reduction: int = 4

    def __post_init__(self):
        for name in ("point_conv_widths", "graph_block_widths", "head_widths", "transform_widths"):
            object.__setattr__(self, name, tuple(int(w) for w in getattr(self, name)))
        JetOrder(self.jet_order)
        if not self.point_conv_widths or not self.graph_block_widths or not self.head_widths:
            raise ConfigurationError("channel width lists must be non-empty")
        if len(self.transform_widths) != 3:
            raise ConfigurationError("transform_widths needs exactly 3 entries")
        if self.graph_block_count not in (1, 2, 3):
            raise ConfigurationError(f"graph_block_count must be 1, 2 or 3, got {self.graph_block_count}")
        if len(self.graph_block_widths) not in (1, self.graph_block_count):
            raise ConfigurationError("graph_block_widths needs one width or one per block")
        if not 0 < self.k2 < self.k1 < self.patch_size:
            raise ConfigurationError(
                f"need 0 < k2 < k1 < patch_size, got k2={self.k2} k1={self.k1} N_p={self.patch_size}")
        if self.patch_size < JetOrder(self.jet_order).term_count:
            raise ConfigurationError("patch_size smaller than the jet term count")

    def block_width(self, i: int) -> int:
        widths = self.graph_block_widths
        return widths[0] if len(widths) == 1 else widths[i]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


# --------------------------------------------------------------------------
# layers


class Dense:
    def __init__(self, name: str, c_in: int, c_out: int, rng: np.random.Generator, zero: bool = False):
        w = np.zeros((c_in, c_out)) if zero else rng.normal(0.0, np.sqrt(2.0 / c_in), (c_in, c_out))
        self.weight = Parameter(w, f"{name}.weight")
        self.bias = Parameter(np.zeros(c_out), f"{name}.bias")

    def __call__(self, x: Tensor) -> Tensor:
        return ad.matmul(x, self.weight) + self.bias

    def parameters(self) -> list[Parameter]:
        return [self.weight, self.bias]

    def buffers(self) -> dict[str, BatchNormState]:
        return {}


class Unit:
    """1x1 convolution + batch norm + leaky ReLU."""

    def __init__(self, name: str, c_in: int, c_out: int, rng: np.random.Generator):
        self.name = name
        self.dense = Dense(name, c_in, c_out, rng)
        self.gamma = Parameter(np.ones(c_out), f"{name}.bn.gamma")
        self.beta = Parameter(np.zeros(c_out), f"{name}.bn.beta")
        self.state = BatchNormState.fresh(c_out)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        h = ad.batch_norm(self.dense(x), self.gamma, self.beta, self.state, training)
        return ad.leaky_relu(h, LEAKY_SLOPE)

    def parameters(self) -> list[Parameter]:
        return self.dense.parameters() + [self.gamma, self.beta]

    def buffers(self) -> dict[str, BatchNormState]:
        return {f"{self.name}.bn": self.state}


class SharedMLP:
    """Stack of :class:`Unit` applied independently to every row."""

    def __init__(self, name: str, widths, rng: np.random.Generator):
        widths = list(widths)
        self.units = [Unit(f"{name}.{i}", a, b, rng) for i, (a, b) in enumerate(zip(widths, widths[1:]))]

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        for unit in self.units:
            x = unit(x, training)
        return x

    def parameters(self) -> list[Parameter]:
        return [p for u in self.units for p in u.parameters()]

    def buffers(self) -> dict[str, BatchNormState]:
        return {k: v for u in self.units for k, v in u.buffers().items()}


class TransformNet:
    """Predicts a dim x dim matrix per patch; starts at the identity."""

    def __init__(self, name: str, dim: int, widths, rng: np.random.Generator):
        w0, w1, w2 = widths
        self.dim = dim
        self.points = SharedMLP(f"{name}.mlp", (dim, w0, w1), rng)
        self.fc = Dense(f"{name}.fc", w1, w2, rng)
        self.out = Dense(f"{name}.out", w2, dim * dim, rng, zero=True)
        self.out.bias.data[:] = np.eye(dim).reshape(-1)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        b = x.shape[0]
        h = ad.reduce_max(self.points(x, training), axis=1)
        h = ad.leaky_relu(self.fc(h), LEAKY_SLOPE)
        return ad.reshape(self.out(h), (b, self.dim, self.dim))

    def parameters(self) -> list[Parameter]:
        return self.points.parameters() + self.fc.parameters() + self.out.parameters()

    def buffers(self) -> dict[str, BatchNormState]:
        return self.points.buffers()


class Gate:
    """Squeeze-excitation style mapping: pooled C-vector -> C gate logits."""

    def __init__(self, name: str, channels: int, reduction: int, rng: np.random.Generator):
        hidden = max(1, channels // reduction)
        self.squeeze = Dense(f"{name}.squeeze", channels, hidden, rng)
        self.excite = Dense(f"{name}.excite", hidden, channels, rng)

    def __call__(self, pooled: Tensor) -> Tensor:
        return self.excite(ad.leaky_relu(self.squeeze(pooled), LEAKY_SLOPE))

    def parameters(self) -> list[Parameter]:
        return self.squeeze.parameters() + self.excite.parameters()

    def buffers(self) -> dict[str, BatchNormState]:
        return {}


# --------------------------------------------------------------------------
# graph operations


def knn_feature_graph(features, k: int) -> np.ndarray:
    """Indices of the k nearest other rows in feature space, ties by index.

    ``features`` is (N, C) or (B, N, C); the result is (N, k) or (B, N, k).
    """
    f = features.data if isinstance(features, Tensor) else np.asarray(features, dtype=np.float64)
    squeeze = f.ndim == 2
    if squeeze:
        f = f[None]
    n = f.shape[1]
    if not 0 < k < n:
        raise SizeError(f"need 0 < k < N for a feature graph, got k={k}, N={n}")
    sq = (f * f).sum(axis=-1)
    d2 = sq[:, :, None] + sq[:, None, :] - 2.0 * np.matmul(f, np.swapaxes(f, 1, 2))
    np.maximum(d2, 0.0, out=d2)
    idx = np.arange(n)
    d2[:, idx, idx] = np.inf
    out = np.argsort(d2, axis=-1, kind="stable")[:, :, :k]
    return out[0] if squeeze else out


def edge_features(features: Tensor, idx: np.ndarray) -> Tensor:
    """(.., N, k, 2C) tensor with entry (i, j) = [f_j - f_i, f_i]."""
    features = ad.as_tensor(features)
    neighbors = ad.gather_rows(features, idx)
    center = ad.reshape(features, features.shape[:-1] + (1, features.shape[-1]))
    center = ad.expand(center, neighbors.shape)
    return ad.concat([neighbors - center, center], axis=-1)


def graph_conv(features: Tensor, idx: np.ndarray, mlp, training: bool = False) -> Tensor:
    """Shared MLP over edge features, then channelwise max over each neighbor list."""
    edges = edge_features(features, idx)
    return ad.reduce_max(mlp(edges, training), axis=-2)


def adaptive_fuse(point_features: Tensor, neighborhood_features: Tensor, gate) -> tuple[Tensor, Tensor]:
    """Gated blend ``s * F + (1 - s) * F'`` with ``s = sigmoid(gate(mean_N(F + F')))``.

    Returns (fused features, gate s) with s of shape (B, 1, C).
    """
    f, fp = ad.as_tensor(point_features), ad.as_tensor(neighborhood_features)
    if f.shape != fp.shape:
        raise ShapeError(f"adaptive_fuse: shapes differ {f.shape} vs {fp.shape}")
    pooled = ad.reduce_mean(f + fp, axis=-2, keepdims=True)
    s = ad.sigmoid(gate(pooled))
    s_full = ad.expand(s, f.shape)
    return s_full * f + (1.0 - s_full) * fp, s


def multi_scale_layer(features: Tensor, large_scale: Tensor, k2: int, mlp, training: bool = False,
                      idx: np.ndarray | None = None) -> Tensor:
    """Fuse the k1-scale output into each k2-neighbour feature, then max-pool.

    ``large_scale`` is the per-point output of the k1 branch.
    """
    features = ad.as_tensor(features)
    if idx is None:
        idx = knn_feature_graph(features, k2)
    neighbors = ad.gather_rows(features, idx)
    c = large_scale.shape[-1]
    ctx = ad.reshape(large_scale, large_scale.shape[:-1] + (1, c))
    ctx = ad.expand(ctx, neighbors.shape[:-1] + (c,))
    return ad.reduce_max(mlp(ad.concat([neighbors, ctx], axis=-1), training), axis=-2)


class GraphBlock:
    def __init__(self, name: str, c_in: int, c_out: int, config: ModelConfig, rng: np.random.Generator):
        self.k1, self.k2 = config.k1, config.k2
        self.edge = SharedMLP(f"{name}.edge", (2 * c_in, c_out), rng)
        self.proj = self.gate = self.multi = None
        if config.use_adaptive_module:
            self.proj = SharedMLP(f"{name}.proj", (c_in, c_out), rng)
            self.gate = Gate(f"{name}.gate", c_out, config.gate_reduction, rng)
        if config.use_multi_scale:
            self.multi = SharedMLP(f"{name}.multi", (c_in + c_out, c_out), rng)

    def __call__(self, f: Tensor, training: bool) -> Tensor:
        out = graph_conv(f, knn_feature_graph(f, self.k1), self.edge, training)
        if self.gate is not None:
            out, _ = adaptive_fuse(self.proj(f, training), out, self.gate)
        if self.multi is not None:
            out = multi_scale_layer(f, out, self.k2, self.multi, training)
        return out

    def _parts(self):
        return [m for m in (self.edge, self.proj, self.gate, self.multi) if m is not None]

    def parameters(self) -> list[Parameter]:
        return [p for m in self._parts() for p in m.parameters()]

    def buffers(self) -> dict[str, BatchNormState]:
        return {k: v for m in self._parts() for k, v in m.buffers().items()}


# --------------------------------------------------------------------------
# model


@dataclass
class ForwardOutput:
    weights: Tensor          # (B, N)
    offsets: Tensor          # (B, N, 3)
    points: Tensor           # (B, N, 3) canonical points after the spatial transform
    a1: Tensor               # (B, 3, 3)
    a2: Tensor | None        # (B, C, C)


@dataclass
class FitOutput:
    beta: Tensor             # (B, N_n)
    normal: Tensor           # (B, 3) canonical frame, A1 undone
    neighbor_normals: Tensor  # (B, N, 3) canonical frame, A1 undone
    regularized: np.ndarray  # (B,) bool


class GraphFitModel:
    """All learned tensors of the network plus batch-norm running statistics."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        c = config
        self.point_transform = (TransformNet("stn1", 3, c.transform_widths, rng)
                                if c.use_point_transform else None)
        self.point_convs = SharedMLP("pointconv", (3,) + c.point_conv_widths, rng)
        width = c.point_conv_widths[-1]
        self.feature_transform = (TransformNet("stn2", width, c.transform_widths, rng)
                                  if c.use_feature_transform else None)
        self.blocks = []
        total = 0
        for i in range(c.graph_block_count):
            out = c.block_width(i)
            self.blocks.append(GraphBlock(f"block{i}", width, out, c, rng))
            width = out
            total += out
        self.head = SharedMLP("head", (total,) + c.head_widths, rng)
        self.head_out = Dense("head.out", c.head_widths[-1], 4, rng, zero=True)
        names = [p.name for p in self.parameters()]
        assert len(names) == len(set(names)), "duplicate parameter names"

    def _modules(self):
        mods = [self.point_transform, self.point_convs, self.feature_transform, *self.blocks,
                self.head, self.head_out]
        return [m for m in mods if m is not None]

    def parameters(self) -> list[Parameter]:
        return [p for m in self._modules() for p in m.parameters()]

    def named_parameters(self) -> dict[str, Parameter]:
        return {p.name: p for p in self.parameters()}

    def buffers(self) -> dict[str, BatchNormState]:
        return {k: v for m in self._modules() for k, v in m.buffers().items()}

    def forward(self, points, training: bool = False) -> ForwardOutput:
        """Run the network on canonical patch points of shape (B, N, 3)."""
        pts = ad.as_tensor(points)
        if pts.ndim != 3 or pts.shape[-1] != 3:
            raise ShapeError(f"expected (B, N, 3) points, got {pts.shape}")
        if pts.shape[1] != self.config.patch_size:
            raise ShapeError(f"patch has {pts.shape[1]} points, model expects {self.config.patch_size}")
        b = pts.shape[0]
        if self.point_transform is not None:
            a1 = self.point_transform(pts, training)
            pts = ad.matmul(pts, a1)
        else:
            a1 = ad.Tensor(np.broadcast_to(np.eye(3), (b, 3, 3)).copy())
        f = self.point_convs(pts, training)
        a2 = None
        if self.feature_transform is not None:
            a2 = self.feature_transform(f, training)
            f = ad.matmul(f, a2)
        outs = []
        for block in self.blocks:
            f = block(f, training)
            outs.append(f)
        h = self.head(ad.concat(outs, axis=-1) if len(outs) > 1 else outs[0], training)
        raw = self.head_out(h)
        weights = ad.clamp_min(ad.sigmoid(raw[..., 0]), WEIGHT_FLOOR)
        offsets = ad.tanh(raw[..., 1:4]) * OFFSET_LIMIT
        return ForwardOutput(weights, offsets, pts, a1, a2)


# --------------------------------------------------------------------------
# differentiable jet fit


def _monomial_columns(x: Tensor, y: Tensor, n: int, dx: bool = False, dy: bool = False) -> Tensor:
    """(B, N, N_n) Vandermonde (or one of its partials) built on the tape."""
    xp, yp = [None, x], [None, y]
    for i in range(2, n + 1):
        xp.append(xp[-1] * x)
        yp.append(yp[-1] * y)
    cols = []
    for a, b in monomial_exponents(n):
        coef = 1.0
        if dx:
            coef, a = a, a - 1
        if dy:
            coef, b = b, b - 1
        if coef == 0 or a < 0 or b < 0:
            cols.append(ad.Tensor(np.zeros(x.shape)))
            continue
        term = None
        for base, power in ((xp, a), (yp, b)):
            if power > 0:
                term = base[power] if term is None else term * base[power]
        if term is None:
            term = ad.Tensor(np.ones(x.shape))
        cols.append(term * coef if coef != 1 else term)
    return ad.concat([ad.reshape(c, c.shape + (1,)) for c in cols], axis=-1)


def _unit_rows(t: Tensor) -> Tensor:
    return ad.normalize(t, axis=-1)


def _undo_transform(normals: Tensor, a1: Tensor) -> Tensor:
    """Map normals of A1-transformed points (rows p @ A1) back: n @ A1^T."""
    squeeze = normals.ndim == 2
    if squeeze:
        normals = ad.reshape(normals, (normals.shape[0], 1, 3))
    out = _unit_rows(ad.matmul(normals, ad.transpose(a1)))
    return ad.reshape(out, (out.shape[0], 3)) if squeeze else out


def fit_jet(out: ForwardOutput, order) -> FitOutput:
    """Weighted jet fit on offset-shifted points, differentiable end to end."""
    order = order if isinstance(order, JetOrder) else JetOrder(int(order))
    n = order.n
    shifted = out.points + out.offsets
    x, y, z = shifted[..., 0], shifted[..., 1], shifted[..., 2]
    m = _monomial_columns(x, y, n)
    b, npts, nn = m.shape
    w = ad.expand(ad.reshape(out.weights, (b, npts, 1)), m.shape)
    wm = m * w
    lhs = ad.matmul(ad.transpose(m), wm)
    lhs = (lhs + ad.transpose(lhs)) * 0.5
    rhs = ad.reshape(ad.matmul(ad.transpose(wm), ad.reshape(z, (b, npts, 1))), (b, nn))
    regularized = np.zeros(b, dtype=bool)
    ridge = np.zeros((b, nn, nn))
    for i in range(b):
        try:
            np.linalg.cholesky(lhs.data[i])
        except np.linalg.LinAlgError:
            regularized[i] = True
            ridge[i] = ridge_lambda(lhs.data[i]) * np.eye(nn)
    if regularized.any():
        lhs = lhs + ad.Tensor(ridge)
    beta = ad.solve_spd(lhs, rhs)
    ones = ad.Tensor(np.ones((b, 1)))
    normal = _unit_rows(ad.concat([-beta[:, 1:2], -beta[:, 2:3], ones], axis=-1))
    gx = ad.matmul(_monomial_columns(x, y, n, dx=True), ad.reshape(beta, (b, nn, 1)))
    gy = ad.matmul(_monomial_columns(x, y, n, dy=True), ad.reshape(beta, (b, nn, 1)))
    nb = _unit_rows(ad.concat([-gx, -gy, ad.Tensor(np.ones((b, npts, 1)))], axis=-1))
    return FitOutput(beta, _undo_transform(normal, out.a1), _undo_transform(nb, out.a1), regularized)


# --------------------------------------------------------------------------
# single-patch conveniences


def spatial_transform(model: GraphFitModel, patch: Patch) -> tuple[np.ndarray, np.ndarray]:
    """(transformed canonical points, A1) for one patch, inference mode."""
    pts = ad.Tensor(patch.local_points[None])
    if model.point_transform is None:
        return patch.local_points.copy(), np.eye(3)
    a1 = model.point_transform(pts, training=False)
    return ad.matmul(pts, a1).data[0], a1.data[0]


def forward(model: GraphFitModel, config: ModelConfig, patch: Patch) -> tuple[np.ndarray, np.ndarray]:
    """Per-point (weights, offsets) for one patch, inference mode."""
    if len(patch) != config.patch_size:
        raise ShapeError(f"patch has {len(patch)} points, config expects {config.patch_size}")
    out = model.forward(patch.local_points[None], training=False)
    return out.weights.data[0].copy(), out.offsets.data[0].copy()


def estimate_normal(model: GraphFitModel, config: ModelConfig, patch: Patch) -> np.ndarray:
    if len(patch) != config.patch_size:
        raise ShapeError(f"patch has {len(patch)} points, config expects {config.patch_size}")
    return estimate_normals_batch(model, [patch])[0]


def estimate_normals_batch(model: GraphFitModel, patches: list[Patch], chunk: int = 64) -> np.ndarray:
    """World-frame unit normals for a list of patches."""
    result = []
    for start in range(0, len(patches), chunk):
        group = patches[start:start + chunk]
        pts = np.stack([p.local_points for p in group])
        fit = fit_jet(model.forward(pts, training=False), model.config.jet_order)
        for p, n in zip(group, fit.normal.data):
            w = p.frame.direction_to_world(n)
            result.append(w / np.linalg.norm(w))
    return np.array(result).reshape(-1, 3)
