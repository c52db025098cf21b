"""Dense float64 tensors with a reverse-mode gradient tape.

Every differentiable op records its parents and a closure that maps the
output gradient to parent gradients.  Tensors created from inputs that do not
require gradients are recorded as plain leaves, so frozen forward passes cost
nothing extra.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64


class NumericError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


class ShapeError(ValueError):
    """Raised on incompatible operand shapes."""


def _check_finite(arr: np.ndarray, op: str) -> np.ndarray:
    # NaN/Inf anywhere makes the sum non-finite.
    if not math.isfinite(arr.sum()) and not np.isfinite(arr).all():
        raise NumericError(f"non-finite values produced by {op}")
    return arr


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        _parents: tuple["Tensor", ...] = (),
        _backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None,
        _op: str = "leaf",
    ):
        arr = np.asarray(data, dtype=DTYPE)
        self.data = _check_finite(arr, _op)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._backward = _backward
        self._op = _op

    # -- basic protocol -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self._op}{flag})"

    # -- operators ------------------------------------------------------
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if not np.isscalar(other):
            raise TypeError("only division by a scalar is supported")
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))

    def sum(self):
        return tsum(self)

    def mean(self):
        return tmean(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward, op: str) -> Tensor:
    track = any(p.requires_grad for p in parents)
    if not track:
        return Tensor(data, _op=op)
    return Tensor(data, requires_grad=True, _parents=parents, _backward=backward, _op=op)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    return grad.reshape((-1,) + shape).sum(axis=0) if lead > 0 else grad


def _check_trailing(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape:
        return
    small, big = (b, a) if b.ndim <= a.ndim else (a, b)
    if small.ndim == 0 or big.shape[big.ndim - small.ndim:] != small.shape:
        raise ShapeError(f"{op}: cannot combine shapes {a.shape} and {b.shape}")


# -- elementwise ---------------------------------------------------------
def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may match a trailing slice of ``a`` (bias add)."""
    _check_trailing(a, b, "add")
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, (a, b), backward, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_trailing(a, b, "sub")
    out = a.data - b.data

    def backward(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return _make(out, (a, b), backward, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_trailing(a, b, "mul")
    out = a.data * b.data

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(out, (a, b), backward, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    out = a.data * c

    def backward(g):
        return (g * c,)

    return _make(out, (a,), backward, "scale")


def gelu(a: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    x = a.data
    k = math.sqrt(2.0 / math.pi)
    x2 = x * x
    t = np.tanh(k * x * (1.0 + 0.044715 * x2))
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        dinner = k * (1.0 + 3 * 0.044715 * x2)
        d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
        return (g * d,)

    return _make(out, (a,), backward, "gelu")


# -- shape ops -------------------------------------------------------------
def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    out = a.data.reshape(shape)

    def backward(g):
        return (g.reshape(a.shape),)

    return _make(out, (a,), backward, "reshape")


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(range(a.ndim))[:-2] + (a.ndim - 1, a.ndim - 2)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = a.data.transpose(axes)

    def backward(g):
        return (g.transpose(inv),)

    return _make(out, (a,), backward, "transpose")


# -- linear algebra ----------------------------------------------------------
def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``b`` may be 2-D (shared across ``a``'s leading batch axes) or have the
    same leading axes as ``a``.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs at least 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    if b.ndim > 2 and b.shape[:-2] != a.shape[:-2]:
        raise ShapeError(f"matmul batch dimensions differ: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            if b.ndim == 2:
                k, n = b.shape
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return ga, gb

    return _make(out, (a, b), backward, "matmul")


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``weight[ids]``; gradient is scattered back with add.at."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise IndexError("token id out of range for embedding table")
    out = weight.data[ids]

    def backward(g):
        gw = np.zeros_like(weight.data)
        np.add.at(gw, ids.reshape(-1), g.reshape(-1, weight.shape[1]))
        return (gw,)

    return _make(out, (weight,), backward, "embedding")


# -- reductions ----------------------------------------------------------------
def tsum(a: Tensor) -> Tensor:
    out = np.asarray(a.data.sum())

    def backward(g):
        return (np.full(a.shape, float(g)),)

    return _make(out, (a,), backward, "sum")


def tmean(a: Tensor) -> Tensor:
    n = a.size
    out = np.asarray(a.data.sum() / n)

    def backward(g):
        return (np.full(a.shape, float(g) / n),)

    return _make(out, (a,), backward, "mean")


def sq_sum(a: Tensor) -> Tensor:
    """Sum of squares, ``||a||^2``."""
    out = np.asarray(np.sum(a.data * a.data))

    def backward(g):
        return (2.0 * float(g) * a.data,)

    return _make(out, (a,), backward, "sq_sum")


def dot(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"dot needs equal shapes, got {a.shape} and {b.shape}")
    out = np.asarray(np.sum(a.data * b.data))

    def backward(g):
        return float(g) * b.data, float(g) * a.data

    return _make(out, (a, b), backward, "dot")


# -- normalisation and probabilities -------------------------------------------
def _softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis, stabilised by subtracting the row max."""
    y = _softmax(x.data)

    def backward(g):
        return (y * (g - np.sum(g * y, axis=-1, keepdims=True)),)

    return _make(y, (x,), backward, "softmax")


def causal_softmax(scores: Tensor) -> Tensor:
    """Softmax over the last axis of ``[..., S, S]`` scores with future keys masked."""
    s_q, s_k = scores.shape[-2:]
    mask = np.triu(np.ones((s_q, s_k), dtype=bool), k=1)
    masked = np.where(mask, -np.inf, scores.data)
    z = masked - masked.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - np.sum(g * y, axis=-1, keepdims=True)),)

    return _make(y, (scores,), backward, "causal_softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean / unit variance, then apply gain and bias."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError("layer_norm gain/bias must match the last dimension")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        gx = gg = gb = None
        if gain.requires_grad:
            gg = np.sum(g * xhat, axis=tuple(range(g.ndim - 1)))
        if bias.requires_grad:
            gb = np.sum(g, axis=tuple(range(g.ndim - 1)))
        if x.requires_grad:
            dxhat = g * gain.data
            gx = inv * (
                dxhat
                - dxhat.mean(axis=-1, keepdims=True)
                - xhat * np.mean(dxhat * xhat, axis=-1, keepdims=True)
            )
        return gx, gg, gb

    return _make(out, (x, gain, bias), backward, "layer_norm")


def log_softmax_np(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def cross_entropy(logits: Tensor, targets: np.ndarray, ignore_index: int = -1) -> Tensor:
    """Mean negative log-likelihood of ``targets`` under ``logits`` (last axis).

    Positions whose target equals ``ignore_index`` are excluded from the mean.
    """
    v = logits.shape[-1]
    flat = logits.data.reshape(-1, v)
    t = np.asarray(targets, dtype=np.int64).reshape(-1)
    if t.shape[0] != flat.shape[0]:
        raise ShapeError(f"{t.shape[0]} targets for {flat.shape[0]} logit rows")
    keep = t != ignore_index
    if np.any(t[keep] < 0) or np.any(t[keep] >= v):
        raise IndexError(f"target id out of range [0, {v})")
    count = int(keep.sum())
    if count == 0:
        raise ValueError("cross_entropy with no scored positions")
    rows = np.nonzero(keep)[0]
    logp = log_softmax_np(flat[rows])
    nll = -logp[np.arange(rows.size), t[rows]]
    out = np.asarray(nll.sum() / count)

    def backward(g):
        grad = np.zeros_like(flat)
        p = np.exp(logp)
        p[np.arange(rows.size), t[rows]] -= 1.0
        grad[rows] = p * (float(g) / count)
        return (grad.reshape(logits.shape),)

    return _make(out, (logits,), backward, "cross_entropy")


def kl_divergence(target_logits: np.ndarray | Tensor, logits: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Token-averaged ``KL(softmax(target) || softmax(logits))``.

    The target distribution is treated as a constant; only ``logits`` receives
    a gradient.  ``mask`` (one bool per row) restricts the average to the
    selected positions.
    """
    tgt = target_logits.data if isinstance(target_logits, Tensor) else np.asarray(target_logits, DTYPE)
    if tgt.shape != logits.shape:
        raise ShapeError(f"KL shapes differ: {tgt.shape} vs {logits.shape}")
    v = logits.shape[-1]
    logp = log_softmax_np(tgt.reshape(-1, v))
    logq = log_softmax_np(logits.data.reshape(-1, v))
    p = np.exp(logp)
    if mask is None:
        w = np.ones(logp.shape[0])
    else:
        w = np.asarray(mask, dtype=DTYPE).reshape(-1)
        if w.shape[0] != logp.shape[0]:
            raise ShapeError(f"mask has {w.shape[0]} rows for {logp.shape[0]} logit rows")
    rows = float(w.sum())
    if rows == 0:
        raise ValueError("kl_divergence with no selected positions")
    per_row = np.sum(p * (logp - logq), axis=-1)
    out = np.asarray(max(float(per_row @ w) / rows, 0.0))

    def backward(g):
        q = np.exp(logq)
        return (((q - p) * w[:, None]).reshape(logits.shape) * (float(g) / rows),)

    return _make(out, (logits,), backward, "kl")


# -- gradient tape ------------------------------------------------------------
def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> list[Tensor]:
    """Backpropagate from a scalar ``loss``; returns the leaves that received gradients.

    Gradients accumulate into ``leaf.grad`` for every leaf with
    ``requires_grad``.  Intermediate gradients are discarded.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return []
    order = _topological(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: list[Tensor] = []
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if g.shape != node.shape:
            raise ShapeError(f"gradient shape {g.shape} != value shape {node.shape} at {node._op}")
        _check_finite(g, f"backward of {node._op}")
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            leaves.append(node)
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            prev = grads.get(id(parent))
            grads[id(parent)] = pg if prev is None else prev + pg
    return leaves


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
