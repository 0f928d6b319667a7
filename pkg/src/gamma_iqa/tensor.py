"""Dense float64 tensors with reverse-mode automatic differentiation.

Only the operations the assessor model needs are provided. Broadcasting is
limited to a size-1 operand against a tensor; everything else must match
shape exactly. Every op records a local gradient rule when one of its inputs
requires gradients, and :func:`backward` replays those rules in reverse
topological order (the tape).
"""
from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np


class DimensionError(ValueError):
    """Operand shapes do not conform."""


class NumericDomainError(ValueError):
    """Non-finite values where finite ones are required."""


class ContractError(RuntimeError):
    """An operation was called outside its contract."""


_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable tape recording in this thread (inference only)."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if arr.size == 0:
            raise NumericDomainError("empty tensor")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _scalar_error(self)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _scalar_error(t: Tensor) -> float:
    raise ContractError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def record(data: np.ndarray, parents: tuple[Tensor, ...], rule, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    needs = grad_enabled() and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = parents
        out._backward = rule
    else:
        out._parents = ()
        out._backward = None
    return out


# ---------------------------------------------------------------- elementwise

def _pair(a, b, name: str) -> tuple[Tensor, Tensor]:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise DimensionError(f"{name}: shapes {a.shape} and {b.shape} do not conform")
    return a, b


def _reduce_to(g: np.ndarray, t: Tensor) -> np.ndarray:
    if g.shape == t.shape:
        return g
    return np.full(t.shape, g.sum())


def add(a, b) -> Tensor:
    a, b = _pair(a, b, "add")
    out = a.data + b.data
    return record(out, (a, b), lambda g: (_reduce_to(g, a), _reduce_to(g, b)), "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b, "sub")
    out = a.data - b.data
    return record(out, (a, b), lambda g: (_reduce_to(g, a), _reduce_to(-g, b)), "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b, "mul")
    out = a.data * b.data

    def rule(g):
        return _reduce_to(g * b.data, a), _reduce_to(g * a.data, b)

    return record(out, (a, b), rule, "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b, "div")
    out = a.data / b.data

    def rule(g):
        return _reduce_to(g / b.data, a), _reduce_to(-g * a.data / b.data**2, b)

    return record(out, (a, b), rule, "div")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return record(a.data * c, (a,), lambda g: (g * c,), "scale")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return record(out, (a,), lambda g: (g * out,), "exp")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return record(a.data * mask, (a,), lambda g: (g * mask,), "relu")


# ---------------------------------------------------------------- structural

def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: cannot view {src} as {tuple(shape)}") from exc
    return record(out, (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(range(a.data.ndim - 2)) + (a.data.ndim - 1, a.data.ndim - 2)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return record(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),), "transpose")


def take(a: Tensor, index: Sequence[int] | np.ndarray, axis: int = 0) -> Tensor:
    """Gather slices of ``a`` along ``axis``; repeated indices accumulate."""
    idx = np.asarray(index, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[axis]):
        raise IndexError(f"take: index out of range for axis of length {a.shape[axis]}")
    out = np.take(a.data, idx, axis=axis)

    def rule(g):
        full = np.zeros_like(a.data)
        moved = np.moveaxis(full, axis, 0)
        np.add.at(moved, idx.reshape(-1), np.moveaxis(g, axis, 0).reshape((-1,) + moved.shape[1:]))
        return (full,)

    return record(out, (a,), rule, "take")


# ---------------------------------------------------------------- reductions

def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return record(np.array(a.data.sum()), (a,), lambda g: (np.full(shape, float(g)),), "sum")


def mean(a: Tensor, axis: int) -> Tensor:
    if not -a.data.ndim <= axis < a.data.ndim:
        raise DimensionError(f"mean: axis {axis} out of range for shape {a.shape}")
    n = a.shape[axis]
    out = a.data.mean(axis=axis)

    def rule(g):
        return (np.repeat(np.expand_dims(g / n, axis), n, axis=axis),)

    return record(out, (a,), rule, "mean")


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of 2-D tensors, or batched over equal leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    out = a.data @ b.data

    def rule(g):
        return g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g

    return record(out, (a, b), rule, "matmul")


def affine(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """``x @ weight.T + bias`` applied over the last axis of ``x``."""
    d_out, d_in = weight.shape
    if x.shape[-1] != d_in or bias.shape != (d_out,):
        raise DimensionError(
            f"affine: input {x.shape} incompatible with weight {weight.shape} / bias {bias.shape}"
        )
    flat = x.data.reshape(-1, d_in)
    out = (flat @ weight.data.T + bias.data).reshape(x.shape[:-1] + (d_out,))

    def rule(g):
        g2 = g.reshape(-1, d_out)
        gx = (g2 @ weight.data).reshape(x.shape) if x.requires_grad else None
        gw = g2.T @ flat if weight.requires_grad else None
        gb = g2.sum(axis=0) if bias.requires_grad else None
        return gx, gw, gb

    return record(out, (x, weight, bias), rule, "affine")


# ---------------------------------------------------------------- normalisers

def _check_finite(a: Tensor, name: str) -> None:
    if not np.all(np.isfinite(a.data)):
        raise NumericDomainError(f"{name}: input contains NaN or Inf")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.data.ndim <= axis < x.data.ndim:
        raise DimensionError(f"softmax: axis {axis} out of range for shape {x.shape}")
    _check_finite(x, "softmax")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def rule(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return record(p, (x,), rule, "softmax")


def layer_norm(x: Tensor, gain: Tensor, shift: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or shift.shape != (d,):
        raise DimensionError(f"layer_norm: width {d} vs gain {gain.shape} / shift {shift.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc**2).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gain.data + shift.data

    def rule(g):
        lead = tuple(range(g.ndim - 1))
        gg = (g * xhat).sum(axis=lead)
        gs = g.sum(axis=lead)
        gh = g * gain.data
        gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, gg, gs

    return record(out, (x, gain, shift), rule, "layer_norm")


def l2_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Scale every row (last axis) to unit Euclidean length."""
    norm = np.sqrt((x.data**2).sum(axis=-1, keepdims=True) + eps)
    out = x.data / norm

    def rule(g):
        return ((g - out * (g * out).sum(axis=-1, keepdims=True)) / norm,)

    return record(out, (x,), rule, "l2_normalize")


# ---------------------------------------------------------------- mixing

def mix(weights: Tensor, parts: Sequence[Tensor]) -> Tensor:
    """Per-row convex mixture: ``sum_i weights[..., i] * parts[i]``.

    ``weights`` has shape ``(..., n)`` and every part ``(..., d)``.
    """
    n = weights.shape[-1]
    if len(parts) != n:
        raise DimensionError(f"mix: {n} weights but {len(parts)} parts")
    for p in parts:
        if p.shape[:-1] != weights.shape[:-1]:
            raise DimensionError(f"mix: part {p.shape} vs weights {weights.shape}")
    w = weights.data
    out = sum(w[..., i : i + 1] * p.data for i, p in enumerate(parts))

    def rule(g):
        gw = np.stack([(g * p.data).sum(axis=-1) for p in parts], axis=-1)
        return (gw,) + tuple(g * w[..., i : i + 1] for i in range(n))

    return record(out, (weights, *parts), rule, "mix")


# ---------------------------------------------------------------- losses

def mse_loss(pred: Tensor, target) -> Tensor:
    target = as_tensor(target)
    if pred.shape != target.shape:
        raise DimensionError(f"mse_loss: shapes {pred.shape} and {target.shape} differ")
    diff = pred.data - target.data
    n = diff.size

    def rule(g):
        return 2.0 * g * diff / n, -2.0 * g * diff / n

    return record(np.array((diff**2).mean()), (pred, target), rule, "mse")


# ---------------------------------------------------------------- tape

@dataclass
class Tape:
    """Recorded operations in topological order (inputs before outputs)."""

    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def from_output(cls, out: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(out, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        return cls([n for n in order if n._backward is not None])


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    tape = tape or Tape.from_output(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent._backward is None:
                parent.grad = pg.copy() if parent.grad is None else parent.grad + pg
            else:
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg


# ---------------------------------------------------------------- checking

@dataclass
class CheckReport:
    max_rel_error: float
    tol: float
    analytic: np.ndarray
    numeric: np.ndarray

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol


def _eval_scalar(f: Callable[[Tensor], Tensor], x: np.ndarray) -> float:
    with no_grad():
        val = f(Tensor(x)).data
    if val.size != 1:
        raise ContractError(f"grad_check needs a scalar function, got shape {val.shape}")
    val = float(val.reshape(-1)[0])
    if not np.isfinite(val):
        raise NumericDomainError("grad_check: function value is not finite")
    return val


def grad_check(
    f: Callable[[Tensor], Tensor], x, eps: float = 1e-5, tol: float = 1e-4, floor: float = 1e-8
) -> CheckReport:
    """Compare tape gradients with central finite differences.

    The relative error per coordinate is ``|a - n| / max(|a|, |n|, floor)``
    so that coordinates with vanishing gradient are judged absolutely.
    """
    if not 1e-6 <= eps <= 1e-3:
        raise ContractError(f"grad_check: eps {eps} outside [1e-6, 1e-3]")
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    leaf = Tensor(x0.copy(), requires_grad=True)
    out = f(leaf)
    if out.size != 1:
        raise ContractError(f"grad_check needs a scalar function, got shape {out.shape}")
    if not np.all(np.isfinite(out.data)):
        raise NumericDomainError("grad_check: function value is not finite")
    backward(out)
    analytic = leaf.grad if leaf.grad is not None else np.zeros_like(x0)
    numeric = np.zeros_like(x0)
    flat = numeric.reshape(-1)
    for i in range(x0.size):
        xp = x0.copy().reshape(-1)
        xm = x0.copy().reshape(-1)
        xp[i] += eps
        xm[i] -= eps
        flat[i] = (_eval_scalar(f, xp.reshape(x0.shape)) - _eval_scalar(f, xm.reshape(x0.shape))) / (2 * eps)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    err = float((np.abs(analytic - numeric) / denom).max())
    return CheckReport(err, tol, analytic, numeric)


def parameters_grad_check(
    loss_fn: Callable[[], Tensor],
    params: Iterable[Tensor],
    eps: float = 1e-5,
    tol: float = 1e-3,
    floor: float = 1e-6,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> CheckReport:
    """Finite-difference check of ``loss_fn`` against every tensor in ``params``.

    Parameters are perturbed in place; ``max_coords`` subsamples coordinates
    per tensor to bound the cost on large models.
    """
    params = list(params)
    for p in params:
        p.grad = None
    loss = loss_fn()
    backward(loss)
    analytic, numeric = [], []
    rng = rng or np.random.default_rng(0)
    for p in params:
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, max_coords, replace=False))
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            with no_grad():
                fp = float(loss_fn().data)
            flat[i] = orig - eps
            with no_grad():
                fm = float(loss_fn().data)
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericDomainError("grad_check: function value is not finite")
            numeric.append((fp - fm) / (2 * eps))
            analytic.append(g.reshape(-1)[i])
    for p in params:
        p.grad = None
    a, n = np.array(analytic), np.array(numeric)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    err = float((np.abs(a - n) / denom).max()) if a.size else 0.0
    return CheckReport(err, tol, a, n)
