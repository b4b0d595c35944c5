"""Losses, optimizer, learning-rate schedule, training loop and checkpoints."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .data import PatchSample, ShapeRecord, sample_training_patches
from .errors import (CheckpointError, CheckpointShapeError, CheckpointTruncatedError,
                     CheckpointVersionError, ConfigurationError, SizeError)
from .geometry import CloudPatcher, Patch
from .network import FitOutput, ForwardOutput, GraphFitModel, ModelConfig, fit_jet

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = "GRAPHFIT-CHECKPOINT"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 0.05
    lambda2: float = 0.25
    lambda3: float = 0.1
    lambda4: float = 0.01

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not (np.isfinite(v) and v >= 0):
                raise ConfigurationError(f"{f.name} must be finite and >= 0, got {v}")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 256
    learning_rate: float = 1e-3
    epochs: int = 600
    decay_epochs: tuple = (200, 500)
    decay_factor: float = 0.1
    seed: int = 0
    per_shape: int = 1024
    rotate_patches: bool = True

    def __post_init__(self):
        object.__setattr__(self, "decay_epochs", tuple(int(e) for e in self.decay_epochs))
        if not self.learning_rate > 0:
            raise ConfigurationError("learning_rate must be > 0")
        if not 0 < self.decay_factor <= 1:
            raise ConfigurationError("decay_factor must be in (0, 1]")
        if self.batch_size < 1 or self.epochs < 0 or self.per_shape < 1:
            raise ConfigurationError("batch_size and per_shape must be >= 1, epochs >= 0")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigurationError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


def lr_at_epoch(config: TrainConfig, epoch: int) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    passed = sum(1 for e in config.decay_epochs if epoch >= e)
    return config.learning_rate * config.decay_factor ** passed


# --------------------------------------------------------------------------
# losses


def angle_loss(n_gt, n_hat) -> Tensor:
    """|n_gt x n_hat| = |sin(angle)| along the last axis."""
    return ad.norm(ad.cross(ad.as_tensor(n_gt), ad.as_tensor(n_hat)), axis=-1)


def consistency_loss(weights, neighbor_gt, neighbor_hat, lambda1: float, lambda2: float) -> Tensor:
    """Per-patch ``(-l1 * sum log w + l2 * sum w |n_gt x n_hat|) / N_p``."""
    w = ad.as_tensor(weights)
    residual = angle_loss(neighbor_gt, neighbor_hat)
    n_p = w.shape[-1]
    barrier = ad.reduce_sum(ad.log(w), axis=-1) * (-lambda1)
    fit = ad.reduce_sum(w * residual, axis=-1) * lambda2
    return (barrier + fit) * (1.0 / n_p)


def orthogonality_loss(a) -> Tensor:
    """Frobenius norm of I - A A^T over the trailing two axes."""
    a = ad.as_tensor(a)
    if a.ndim < 2 or a.shape[-1] != a.shape[-2]:
        raise ValueError(f"orthogonality_loss needs square matrices, got {a.shape}")
    eye = np.eye(a.shape[-1])
    return ad.norm(ad.Tensor(eye) - ad.matmul(a, ad.transpose(a)), axis=(-2, -1))


@dataclass
class Targets:
    normal: np.ndarray            # (B, 3) canonical frame
    neighbor_normals: np.ndarray  # (B, N, 3) canonical frame


def total_loss(out: ForwardOutput, fit: FitOutput, targets: Targets, weights: LossWeights) -> Tensor:
    """Batch mean of angle + consistency + l3 * reg(A1) + l4 * reg(A2)."""
    per_patch = angle_loss(targets.normal, fit.normal)
    per_patch = per_patch + consistency_loss(out.weights, targets.neighbor_normals, fit.neighbor_normals,
                                             weights.lambda1, weights.lambda2)
    if weights.lambda3:
        per_patch = per_patch + orthogonality_loss(out.a1) * weights.lambda3
    if weights.lambda4 and out.a2 is not None:
        per_patch = per_patch + orthogonality_loss(out.a2) * weights.lambda4
    return ad.reduce_mean(per_patch)


# --------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: list[Parameter], state: AdamState, lr: float, grads: list[np.ndarray] | None = None) -> AdamState:
    """One bias-corrected Adam update, in place on ``params``."""
    grads = [p.grad for p in params] if grads is None else grads
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for p, g in zip(params, grads):
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match {p.name} {p.shape}")
        m = state.m.get(p.name)
        v = state.v.get(p.name)
        if m is None:
            m, v = np.zeros_like(p.data), np.zeros_like(p.data)
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        state.m[p.name], state.v[p.name] = m, v
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state


# --------------------------------------------------------------------------
# data feeding


class PatchDataset:
    """Training shapes with a per-shape query pool and a patch cache.

    Each shape needs ground-truth normals. ``per_shape`` queries are drawn per
    shape every epoch (see :func:`sample_training_patches`).
    """

    def __init__(self, shapes: list[ShapeRecord], patch_size: int, per_shape: int | None = None):
        if not shapes:
            raise ConfigurationError("training dataset is empty")
        for s in shapes:
            if s.cloud.normals is None:
                raise ConfigurationError(f"shape {s.name} has no ground-truth normals")
        self.shapes = shapes
        self.patch_size = patch_size
        self.per_shape = per_shape
        self._patchers = [CloudPatcher(s.cloud, patch_size) for s in shapes]
        self._cache: dict[tuple[int, int], tuple[Patch, np.ndarray, np.ndarray]] = {}

    def __len__(self):
        return sum(len(s.query_indices) if s.query_indices is not None else len(s.cloud) for s in self.shapes)

    def epoch_samples(self, seed: int, epoch: int, per_shape: int) -> list[PatchSample]:
        rng = np.random.default_rng([seed, epoch])
        samples = sample_training_patches(self.shapes, per_shape, int(rng.integers(2 ** 63)))
        order = rng.permutation(len(samples))
        return [samples[i] for i in order]

    def item(self, sample: PatchSample):
        key = (sample.shape_index, sample.query_index)
        hit = self._cache.get(key)
        if hit is None:
            patch = self._patchers[sample.shape_index](sample.query_index)
            normals = self.shapes[sample.shape_index].cloud.normals
            gt = patch.frame.direction_to_local(normals[sample.query_index])
            gt_nb = patch.frame.direction_to_local(normals[patch.source_indices])
            hit = (patch, gt, gt_nb)
            self._cache[key] = hit
        return hit

    def batch(self, samples: list[PatchSample], rng: np.random.Generator | None = None) -> tuple[np.ndarray, Targets]:
        """Stacked canonical points and targets; with ``rng`` each patch gets a
        random rotation about the canonical z axis (heights are unchanged)."""
        items = [self.item(s) for s in samples]
        pts = np.stack([it[0].local_points for it in items])
        gt = np.stack([it[1] for it in items])
        gt_nb = np.stack([it[2] for it in items])
        if rng is not None:
            theta = rng.uniform(0.0, 2.0 * np.pi, len(items))
            c, s = np.cos(theta), np.sin(theta)
            rot = np.zeros((len(items), 3, 3))
            rot[:, 0, 0], rot[:, 0, 1], rot[:, 1, 0], rot[:, 1, 1] = c, s, -s, c
            rot[:, 2, 2] = 1.0
            pts, gt, gt_nb = pts @ rot, (gt[:, None] @ rot)[:, 0], gt_nb @ rot
        return pts, Targets(gt, gt_nb)


# --------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    model: GraphFitModel
    losses: list[float]
    optimizer: AdamState
    epoch: int


def batch_loss(model: GraphFitModel, points: np.ndarray, targets: Targets, weights: LossWeights,
               training: bool = True) -> Tensor:
    out = model.forward(points, training=training)
    fit = fit_jet(out, model.config.jet_order)
    return total_loss(out, fit, targets, weights)


def train(model: GraphFitModel, dataset: PatchDataset, config: TrainConfig, loss_weights: LossWeights,
          optimizer: AdamState | None = None, start_epoch: int = 0, epochs: int | None = None,
          on_epoch: Callable[[int, float], None] | None = None) -> TrainResult:
    """Run mini-batch Adam from ``start_epoch`` up to ``config.epochs`` (or ``epochs`` more).

    Batches are seeded per epoch from ``config.seed`` so a run resumed from a
    checkpoint follows the same trajectory as an uninterrupted one.
    """
    if not isinstance(dataset, PatchDataset) or not dataset.shapes:
        raise ConfigurationError("training dataset is empty")
    optimizer = optimizer or AdamState()
    per_shape = dataset.per_shape or config.per_shape
    end = config.epochs if epochs is None else start_epoch + epochs
    params = model.parameters()
    losses = []
    for epoch in range(start_epoch, end):
        lr = lr_at_epoch(config, epoch)
        samples = dataset.epoch_samples(config.seed, epoch, per_shape)
        aug_rng = np.random.default_rng([config.seed, epoch, 1]) if config.rotate_patches else None
        total, count = 0.0, 0
        for start in range(0, len(samples), config.batch_size):
            chunk = samples[start:start + config.batch_size]
            points, targets = dataset.batch(chunk, aug_rng)
            loss = batch_loss(model, points, targets, loss_weights, training=True)
            ad.zero_grad(params)
            ad.backward(loss)
            adam_step(params, optimizer, lr)
            total += loss.item() * len(chunk)
            count += len(chunk)
        mean = total / count
        losses.append(mean)
        log.info("epoch %d lr %.2e loss %.6f", epoch, lr, mean)
        if on_epoch is not None:
            on_epoch(epoch, mean)
    return TrainResult(model, losses, optimizer, end)


# --------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    version: int
    model_config: ModelConfig
    tensors: dict[str, np.ndarray]
    optimizer: AdamState
    epoch: int
    train_config: TrainConfig | None = None
    rng_state: dict | None = None

    def build_model(self) -> GraphFitModel:
        model = GraphFitModel(self.model_config)
        load_model_tensors(model, self.tensors)
        return model


def model_tensors(model: GraphFitModel) -> dict[str, np.ndarray]:
    out = {f"param/{name}": p.data for name, p in model.named_parameters().items()}
    for name, state in model.buffers().items():
        out[f"buffer/{name}/mean"] = state.mean
        out[f"buffer/{name}/var"] = state.var
    return out


def load_model_tensors(model: GraphFitModel, tensors: dict[str, np.ndarray]) -> None:
    expected = model_tensors(model)
    missing = set(expected) - set(tensors)
    if missing:
        raise CheckpointShapeError(f"checkpoint lacks tensors: {sorted(missing)[:5]}")
    for key, ref in expected.items():
        if tensors[key].shape != ref.shape:
            raise CheckpointShapeError(f"{key}: checkpoint shape {tensors[key].shape} != model {ref.shape}")
    for name, p in model.named_parameters().items():
        p.data = tensors[f"param/{name}"].copy()
        p.grad = np.zeros_like(p.data)
    for name, state in model.buffers().items():
        state.mean = tensors[f"buffer/{name}/mean"].copy()
        state.var = tensors[f"buffer/{name}/var"].copy()


def save_checkpoint(path, model: GraphFitModel, optimizer: AdamState | None = None, epoch: int = 0,
                    train_config: TrainConfig | None = None, rng_state: dict | None = None) -> None:
    """ASCII header (key=value lines + tensor manifest) then little-endian f64 payloads."""
    optimizer = optimizer or AdamState()
    tensors = dict(model_tensors(model))
    for name, m in optimizer.m.items():
        tensors[f"adam/m/{name}"] = m
        tensors[f"adam/v/{name}"] = optimizer.v[name]
    lines = [CHECKPOINT_MAGIC, f"format_version={CHECKPOINT_VERSION}", f"epoch={epoch}",
             f"adam.step={optimizer.step}", f"adam.beta1={optimizer.beta1!r}",
             f"adam.beta2={optimizer.beta2!r}", f"adam.eps={optimizer.eps!r}"]
    if rng_state is not None:
        lines.append(f"rng_state={json.dumps(rng_state, sort_keys=True)}")
    for key, value in model.config.to_dict().items():
        lines.append(f"config.{key}={json.dumps(value)}")
    if train_config is not None:
        for key, value in asdict(train_config).items():
            lines.append(f"train.{key}={json.dumps(value)}")
    offset = 0
    payload = []
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        shape = "x".join(str(d) for d in arr.shape) or "scalar"
        lines.append(f"tensor {name} {shape} {offset}")
        payload.append(arr.tobytes())
        offset += arr.nbytes
    lines.append(f"payload_bytes={offset}")
    lines.append("end_header")
    header = ("\n".join(lines) + "\n").encode("ascii")
    Path(path).write_bytes(header + b"".join(payload))


def _parse_shape(text: str) -> tuple:
    return () if text == "scalar" else tuple(int(d) for d in text.split("x"))


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    marker = b"\nend_header\n"
    end = raw.find(marker)
    if not raw.startswith(CHECKPOINT_MAGIC.encode()):
        if CHECKPOINT_MAGIC.encode().startswith(raw):
            raise CheckpointTruncatedError(f"{path}: file truncated inside the header")
        raise CheckpointError(f"{path}: not a graphfit checkpoint")
    if end < 0:
        raise CheckpointTruncatedError(f"{path}: file truncated inside the header")
    header = raw[:end].decode("ascii").split("\n")[1:]
    payload = raw[end + len(marker):]
    meta: dict[str, str] = {}
    manifest = []
    for line in header:
        if line.startswith("tensor "):
            _, name, shape, offset = line.split(" ")
            manifest.append((name, _parse_shape(shape), int(offset)))
        else:
            key, _, value = line.partition("=")
            meta[key] = value
    version = int(meta.get("format_version", -1))
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"{path}: format version {version}, expected {CHECKPOINT_VERSION}")
    expected_bytes = int(meta["payload_bytes"])
    if len(payload) < expected_bytes:
        raise CheckpointTruncatedError(f"{path}: payload has {len(payload)} of {expected_bytes} bytes")
    if len(payload) > expected_bytes:
        raise CheckpointError(f"{path}: {len(payload) - expected_bytes} trailing bytes after payload")
    tensors = {}
    cursor = 0
    for name, shape, offset in manifest:
        count = int(np.prod(shape)) if shape else 1
        if offset != cursor or offset + 8 * count > expected_bytes:
            raise CheckpointShapeError(f"{path}: manifest entry {name} disagrees with payload layout")
        tensors[name] = np.frombuffer(payload, dtype="<f8", count=count, offset=offset).reshape(shape).astype(np.float64)
        cursor = offset + 8 * count
    if cursor != expected_bytes:
        raise CheckpointShapeError(f"{path}: manifest covers {cursor} of {expected_bytes} payload bytes")
    config = ModelConfig.from_dict({k[7:]: json.loads(v) for k, v in meta.items() if k.startswith("config.")})
    train_items = {k[6:]: json.loads(v) for k, v in meta.items() if k.startswith("train.")}
    optimizer = AdamState(step=int(meta.get("adam.step", 0)), beta1=float(meta.get("adam.beta1", 0.9)),
                          beta2=float(meta.get("adam.beta2", 0.999)), eps=float(meta.get("adam.eps", 1e-8)))
    for name in list(tensors):
        if name.startswith("adam/m/"):
            pname = name[len("adam/m/"):]
            optimizer.m[pname] = tensors.pop(name)
            optimizer.v[pname] = tensors.pop(f"adam/v/{pname}")
    ckpt = Checkpoint(version, config, tensors, optimizer, int(meta.get("epoch", 0)),
                      TrainConfig.from_dict(train_items) if train_items else None,
                      json.loads(meta["rng_state"]) if "rng_state" in meta else None)
    # shapes must agree with what the header's config implies
    ckpt.build_model()
    return ckpt


def epoch_rng_state(seed: int, epoch: int) -> dict:
    """Bit-generator state that seeds batch assembly for ``epoch``."""
    return np.random.default_rng([seed, epoch]).bit_generator.state


def validate_dataset(shapes: list[ShapeRecord], patch_size: int) -> None:
    if not shapes:
        raise ConfigurationError("training dataset is empty")
    for s in shapes:
        if len(s.cloud) < patch_size:
            raise SizeError(f"shape {s.name} has {len(s.cloud)} points, fewer than patch size {patch_size}")
