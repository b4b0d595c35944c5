"""Minimal dense-tensor engine with reverse-mode differentiation.

Every tensor wraps a float64 numpy array. Operations that involve at least one
tensor requiring gradients record their parents and a backward rule; calling
:func:`backward` on a scalar walks that graph in reverse topological order once.

Broadcasting is deliberately narrow: the operands of an elementwise op must
have equal shapes, or the shape of one must be a suffix of the other (the
missing leading axes are broadcast). Anything else needs :func:`expand`.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.linalg
from scipy.special import expit

from .errors import ConditioningError, NonFiniteError, ShapeError

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    """A node on the tape: value, optional parents and a backward rule."""

    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.parents: tuple = ()
        self.backward_fn: BackwardFn | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op!r})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return subtract(self, other)

    def __rsub__(self, other):
        return subtract(other, self)

    def __mul__(self, other):
        return multiply(self, other)

    def __rmul__(self, other):
        return multiply(other, self)

    def __truediv__(self, other):
        return divide(self, other)

    def __rtruediv__(self, other):
        return divide(other, self)

    def __neg__(self):
        return multiply(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)


class Parameter(Tensor):
    """A named leaf tensor with a gradient accumulator of the same shape."""

    __slots__ = ("name",)

    def __init__(self, data, name: str):
        super().__init__(np.array(data, dtype=np.float64), requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_node(data: np.ndarray, parents: Sequence[Tensor], backward_fn: BackwardFn, op: str) -> Tensor:
    """Wrap an op result; records the backward rule only when a parent needs it.

    ``backward_fn`` maps the upstream gradient to one gradient (or None) per
    parent, in order.
    """
    data = np.asarray(data, dtype=np.float64)
    if not np.isfinite(data).all():
        raise NonFiniteError(f"{op} produced non-finite values")
    out = Tensor(data)
    out.op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.backward_fn = backward_fn
    return out


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into the ``grad`` of every reachable leaf.

    Parameters that the loss does not reach are left untouched; call
    :func:`zero_grad` first to get fresh gradients.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topological_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.backward_fn is None:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def zero_grad(parameters: Iterable[Parameter]) -> None:
    for p in parameters:
        p.grad = np.zeros_like(p.data)


# --------------------------------------------------------------------------
# elementwise arithmetic


def _broadcast_shape(a: tuple, b: tuple, op: str) -> tuple:
    if a == b:
        return a
    if len(a) >= len(b) and a[len(a) - len(b):] == b:
        return a
    if len(b) > len(a) and b[len(b) - len(a):] == a:
        return b
    raise ShapeError(f"{op}: incompatible shapes {a} and {b}")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "add")
    return make_node(
        a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add",
    )


def subtract(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "subtract")
    return make_node(
        a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)), "subtract",
    )


def multiply(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "multiply")
    return make_node(
        a.data * b.data, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "multiply",
    )


def divide(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "divide")
    out = a.data / b.data
    return make_node(
        out, (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)),
        "divide",
    )


def expand(t: Tensor, shape: Sequence[int]) -> Tensor:
    """Explicit broadcast (numpy rules) to ``shape``; backward sums back."""
    t = as_tensor(t)
    shape = tuple(shape)
    try:
        out = np.broadcast_to(t.data, shape)
    except ValueError as exc:
        raise ShapeError(f"expand: cannot broadcast {t.shape} to {shape}") from exc

    def bw(g):
        lead = g.ndim - t.ndim
        g = g.sum(axis=tuple(range(lead))) if lead else g
        axes = tuple(i for i, n in enumerate(t.shape) if n == 1 and g.shape[i] != 1)
        if axes:
            g = g.sum(axis=axes, keepdims=True)
        return (g,)

    return make_node(np.array(out), (t,), bw, "expand")


# --------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    _broadcast_shape(a.shape[:-2], b.shape[:-2], "matmul")
    out = np.matmul(a.data, b.data)

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            if b.ndim == 2:
                k = a.shape[-1]
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return make_node(out, (a, b), bw, "matmul")


def _cho_solve_batched(factor: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    k = factor.shape[-1]
    f2 = factor.reshape(-1, k, k)
    r2 = rhs.reshape(-1, k)
    out = np.empty_like(r2)
    for i in range(f2.shape[0]):
        out[i] = scipy.linalg.cho_solve((f2[i], True), r2[i], check_finite=False)
    return out.reshape(rhs.shape)


def solve_spd(a, b) -> Tensor:
    """Solve ``a @ x = b`` for symmetric positive-definite ``a`` (batched).

    Backward: with s = a^{-T} g, db = s and da = -(s x^T), symmetrized.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or a.shape[-1] != a.shape[-2] or a.shape[:-1] != b.shape:
        raise ShapeError(f"solve_spd: incompatible shapes {a.shape} and {b.shape}")
    asym = np.abs(a.data - np.swapaxes(a.data, -1, -2)).max(initial=0.0)
    if asym > 1e-8 * max(1.0, np.abs(a.data).max(initial=0.0)):
        raise ConditioningError(f"solve_spd: matrix not symmetric (max asymmetry {asym:.3g})")
    try:
        factor = np.linalg.cholesky(a.data)
    except np.linalg.LinAlgError as exc:
        raise ConditioningError("solve_spd: matrix is not positive definite") from exc
    x = _cho_solve_batched(factor, b.data)

    def bw(g):
        s = _cho_solve_batched(factor, g)
        outer = s[..., :, None] * x[..., None, :]
        ga = -0.5 * (outer + np.swapaxes(outer, -1, -2))
        return ga, s

    return make_node(x, (a, b), bw, "solve_spd")


# --------------------------------------------------------------------------
# shape manipulation


def reshape(t: Tensor, shape: Sequence[int]) -> Tensor:
    t = as_tensor(t)
    try:
        out = t.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot reshape {t.shape} to {tuple(shape)}") from exc
    return make_node(out, (t,), lambda g: (g.reshape(t.shape),), "reshape")


def transpose(t: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    """Permute axes; the default swaps the last two."""
    t = as_tensor(t)
    if axes is None:
        axes = list(range(t.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return make_node(np.transpose(t.data, axes), (t,), lambda g: (np.transpose(g, inverse),), "transpose")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    nd = tensors[0].ndim
    ax = axis % nd
    for t in tensors[1:]:
        if t.ndim != nd or t.shape[:ax] + t.shape[ax + 1:] != tensors[0].shape[:ax] + tensors[0].shape[ax + 1:]:
            raise ShapeError(f"concat: incompatible shapes {tensors[0].shape} and {t.shape} on axis {axis}")
    splits = np.cumsum([t.shape[ax] for t in tensors])[:-1]
    out = np.concatenate([t.data for t in tensors], axis=ax)
    return make_node(out, tensors, lambda g: tuple(np.split(g, splits, axis=ax)), "concat")


def _is_basic_key(key) -> bool:
    parts = key if isinstance(key, tuple) else (key,)
    return all(isinstance(k, (int, np.integer, slice)) or k is Ellipsis or k is None for k in parts)


def getitem(t: Tensor, key) -> Tensor:
    t = as_tensor(t)
    out = t.data[key]
    basic = _is_basic_key(key)

    def bw(g):
        full = np.zeros_like(t.data)
        if basic:
            full[key] += g
        else:
            np.add.at(full, key, g)
        return (full,)

    return make_node(np.array(out), (t,), bw, "getitem")


def gather_rows(t: Tensor, index: np.ndarray) -> Tensor:
    """Neighbor gather: ``t`` is (N, C) or (B, N, C); ``index`` is (N, k) or (B, N, k).

    Returns (N, k, C) or (B, N, k, C) with ``out[b, i, j] = t[b, index[b, i, j]]``.
    """
    t = as_tensor(t)
    index = np.asarray(index)
    if not np.issubdtype(index.dtype, np.integer):
        raise ShapeError(f"gather_rows: index must be integer, got {index.dtype}")
    batched = t.ndim == 3
    if t.ndim not in (2, 3) or index.ndim != t.ndim or (batched and index.shape[0] != t.shape[0]):
        raise ShapeError(f"gather_rows: incompatible shapes {t.shape} and index {index.shape}")
    n, c = t.shape[-2], t.shape[-1]
    if index.size and (index.min() < 0 or index.max() >= n):
        raise ShapeError(f"gather_rows: index out of range for {n} rows")
    if batched:
        b = t.shape[0]
        flat = (index + (np.arange(b) * n).reshape(b, *([1] * (index.ndim - 1)))).ravel()
    else:
        flat = index.ravel()
    rows = t.data.reshape(-1, c)
    out = rows[flat].reshape(*index.shape, c)

    def bw(g):
        full = np.zeros_like(rows)
        np.add.at(full, flat, g.reshape(-1, c))
        return (full.reshape(t.shape),)

    return make_node(out, (t,), bw, "gather_rows")


# --------------------------------------------------------------------------
# reductions


def reduce_sum(t: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    t = as_tensor(t)
    out = t.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, t.shape).copy(),)

    return make_node(out, (t,), bw, "reduce_sum")


def reduce_mean(t: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    t = as_tensor(t)
    count = t.data.size if axis is None else np.prod([t.shape[a] for a in np.atleast_1d(axis)])
    out = t.data.mean(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, t.shape).copy(),)

    return make_node(out, (t,), bw, "reduce_mean")


def reduce_max(t: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    """Max along one axis; the gradient flows only to the (first) argmax."""
    t = as_tensor(t)
    arg = np.expand_dims(np.argmax(t.data, axis=axis), axis)
    out = np.take_along_axis(t.data, arg, axis=axis)
    if not keepdims:
        out = np.squeeze(out, axis)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        full = np.zeros_like(t.data)
        np.put_along_axis(full, arg, g, axis=axis)
        return (full,)

    return make_node(out, (t,), bw, "reduce_max")


# --------------------------------------------------------------------------
# pointwise nonlinearities


def sigmoid(t: Tensor) -> Tensor:
    t = as_tensor(t)
    s = expit(t.data)
    return make_node(s, (t,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def tanh(t: Tensor) -> Tensor:
    t = as_tensor(t)
    y = np.tanh(t.data)
    return make_node(y, (t,), lambda g: (g * (1.0 - y * y),), "tanh")


def leaky_relu(t: Tensor, slope: float = 0.01) -> Tensor:
    t = as_tensor(t)
    pos = t.data > 0
    return make_node(
        np.where(pos, t.data, slope * t.data), (t,),
        lambda g: (np.where(pos, g, slope * g),), "leaky_relu",
    )


def log(t: Tensor) -> Tensor:
    t = as_tensor(t)
    return make_node(np.log(t.data), (t,), lambda g: (g / t.data,), "log")


def sqrt(t: Tensor) -> Tensor:
    t = as_tensor(t)
    y = np.sqrt(t.data)
    return make_node(y, (t,), lambda g: (0.5 * g / y,), "sqrt")


def clamp_min(t: Tensor, floor: float) -> Tensor:
    t = as_tensor(t)
    keep = t.data > floor
    return make_node(np.where(keep, t.data, floor), (t,), lambda g: (np.where(keep, g, 0.0),), "clamp_min")


def norm(t: Tensor, axis=-1, keepdims: bool = False) -> Tensor:
    """Euclidean norm along ``axis`` (a tuple gives the Frobenius norm).

    The gradient at a zero vector is taken as zero.
    """
    t = as_tensor(t)
    n = np.sqrt((t.data * t.data).sum(axis=axis, keepdims=True))
    out = n if keepdims else np.squeeze(n, axis=axis)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        safe = np.where(n > 0, n, 1.0)
        return (np.where(n > 0, g * t.data / safe, 0.0),)

    return make_node(out, (t,), bw, "norm")


def normalize(t: Tensor, axis: int = -1) -> Tensor:
    t = as_tensor(t)
    n = norm(t, axis=axis, keepdims=True)
    return t / expand(n, t.shape)


def cross(a: Tensor, b: Tensor) -> Tensor:
    """Cross product along the last axis (size 3)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != 3 or b.shape[-1] != 3:
        raise ShapeError(f"cross: last axis must be 3, got {a.shape} and {b.shape}")
    ax, ay, az = a[..., 0], a[..., 1], a[..., 2]
    bx, by, bz = b[..., 0], b[..., 1], b[..., 2]
    parts = [ay * bz - az * by, az * bx - ax * bz, ax * by - ay * bx]
    return concat([reshape(p, p.shape + (1,)) for p in parts], axis=-1)


# --------------------------------------------------------------------------
# batch normalization


@dataclass
class BatchNormState:
    """Running statistics for one batch-norm site."""

    mean: np.ndarray
    var: np.ndarray
    momentum: float = 0.9

    @classmethod
    def fresh(cls, channels: int, momentum: float = 0.9) -> "BatchNormState":
        return cls(np.zeros(channels), np.ones(channels), momentum)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState,
               training: bool, eps: float = 1e-5) -> Tensor:
    """Normalize over every axis except the last (channel) axis.

    In training mode the batch statistics are used and folded into ``state``
    with ``running = momentum * running + (1 - momentum) * batch``.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm: channel mismatch {x.shape} vs {gamma.shape}/{beta.shape}")
    axes = tuple(range(x.ndim - 1))
    m = x.size // c
    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        state.mean = state.momentum * state.mean + (1.0 - state.momentum) * mu
        state.var = state.momentum * state.var + (1.0 - state.momentum) * var
    else:
        mu, var = state.mean, state.var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_std
    out = gamma.data * xhat + beta.data

    def bw(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        dxhat = g * gamma.data
        if training:
            dx = inv_std / m * (m * dxhat - dxhat.sum(axis=axes) - xhat * (dxhat * xhat).sum(axis=axes))
        else:
            dx = dxhat * inv_std
        return dx, dgamma, dbeta

    return make_node(out, (x, gamma, beta), bw, "batch_norm")


# --------------------------------------------------------------------------
# finite-difference verification


@dataclass
class GradientCheckReport:
    tolerance: float
    errors: dict[str, float] = field(default_factory=dict)

    @property
    def failed(self) -> list[str]:
        return [name for name, err in self.errors.items() if not err <= self.tolerance]

    @property
    def passed(self) -> bool:
        return not self.failed

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    def __str__(self):
        lines = [f"gradient check (tol {self.tolerance:g}): {'PASS' if self.passed else 'FAIL'}"]
        for name, err in self.errors.items():
            flag = "ok" if err <= self.tolerance else "FAIL"
            lines.append(f"  {name:<40s} {err:.3e} {flag}")
        return "\n".join(lines)


def gradient_check(function: Callable[[], Tensor], parameters: Sequence[Parameter],
                   tolerance: float = 1e-5, step: float = 1e-5, max_entries: int | None = None,
                   abs_floor: float = 1e-5, seed: int = 0, refinements: int = 2) -> GradientCheckReport:
    """Compare tape gradients against central differences, per parameter.

    The relative error of one entry is ``|a - n| / max(|a|, |n|, abs_floor)``;
    the floor keeps entries whose true gradient is below finite-difference
    resolution from dominating. ``max_entries`` caps the number of (seeded,
    randomly chosen) entries probed per parameter.

    An entry that misses the tolerance is probed again with the step divided
    by 10, up to ``refinements`` times, keeping the smallest error: a
    perturbation can flip a discrete choice (k-NN graph, max, leaky-ReLU
    branch) and land on a jump, whereas a wrong backward rule fails at every
    step.
    """
    zero_grad(parameters)
    backward(function())
    analytic = {p.name: p.grad.copy() for p in parameters}
    rng = np.random.default_rng(seed)
    report = GradientCheckReport(tolerance)
    for p in parameters:
        flat = p.data.reshape(-1)
        entries = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            entries = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        worst = 0.0
        grad = analytic[p.name].reshape(-1)
        for i in entries:
            err = np.inf
            h = step
            for _ in range(refinements + 1):
                orig = flat[i]
                flat[i] = orig + h
                f_plus = function().item()
                flat[i] = orig - h
                f_minus = function().item()
                flat[i] = orig
                numeric = (f_plus - f_minus) / (2.0 * h)
                denom = max(abs(grad[i]), abs(numeric), abs_floor)
                err = min(err, abs(grad[i] - numeric) / denom)
                if err <= tolerance:
                    break
                h /= 10.0
            worst = max(worst, err)
        report.errors[p.name] = worst
    return report
