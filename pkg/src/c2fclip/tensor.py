"""Dense float64 tensors with a reverse-mode gradient tape.

Every differentiable primitive records itself on the active :class:`GradTape`
when at least one input requires a gradient.  :func:`backward` walks the tape
in reverse creation order (a valid topological order), accumulates gradients
into leaf tensors and clears the tape.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import ndtr

__all__ = [
    "Tensor", "GradTape", "ShapeError", "no_grad", "tensor", "backward",
    "add", "sub", "mul", "div", "neg", "exp", "log", "matmul", "sum", "mean",
    "reshape", "transpose", "take", "take_along_axis", "softmax", "log_softmax",
    "layer_norm", "gelu", "linear", "embedding", "mean_pool", "l2_normalize",
]

_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


class GradTape:
    """Ordered record of differentiable operations since the last backward."""

    def __init__(self):
        self.nodes: list[Tensor] = []
        self.enabled = True

    def record(self, node: Tensor) -> None:
        self.nodes.append(node)

    def clear(self) -> None:
        self.nodes.clear()

    def __len__(self) -> int:
        return len(self.nodes)


_tape = GradTape()


def get_tape() -> GradTape:
    return _tape


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (evaluation, weight surgery)."""
    prev = _tape.enabled
    _tape.enabled = False
    try:
        yield
    finally:
        _tape.enabled = prev


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], fn: Callable) -> Tensor:
    out = Tensor(data)
    if _tape.enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = fn
        _tape.record(out)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf that requires a gradient.

    Gradients accumulate into existing ``.grad`` arrays; call ``zero_grad`` on
    parameters between steps.  The tape is cleared afterwards.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss was not produced under a live tape (no input requires grad)")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    try:
        if loss._backward is None:
            _accumulate_leaf(loss, grads.pop(id(loss)))
            return
        for node in reversed(_tape.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if parent._backward is None:
                    _accumulate_leaf(parent, pg)
                else:
                    key = id(parent)
                    if key in grads:
                        grads[key] = grads[key] + pg
                    else:
                        grads[key] = pg
    finally:
        _tape.clear()


def _accumulate_leaf(leaf: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=np.float64).reshape(leaf.shape)
    leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g


# -- elementwise -------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _result(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape),
                              _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data / b.data
    return _result(out, (a, b),
                   lambda g: (_unbroadcast(g / b.data, a.shape),
                              _unbroadcast(-g * out / b.data, b.shape)))


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _result(-a.data, (a,), lambda g: (-g,))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = _as_tensor(a)
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,))


def gelu(x) -> Tensor:
    """Exact GELU, ``x * Phi(x)`` with the erf-based normal CDF (no tanh approximation)."""
    x = _as_tensor(x)
    cdf = ndtr(x.data)
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
    return _result(x.data * cdf, (x,), lambda g: (g * (cdf + x.data * pdf),))


# -- linear algebra & reductions ---------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}") from exc

    def fn(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _result(out, (a, b), fn)


def _expand_reduced(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(np.reshape(g, (1,) * len(shape)), shape)
    if not keepdims:
        axes = (axis,) if isinstance(axis, int) else axis
        axes = tuple(ax % len(shape) for ax in axes)
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def sum(a, axis=None, keepdims=False) -> Tensor:  # noqa: A001 - mirrors numpy
    a = _as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)
    return _result(np.asarray(out), (a,),
                   lambda g: (_expand_reduced(g, a.shape, axis, keepdims).copy(),))


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = _as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.size // max(np.asarray(out).size, 1)
    return _result(np.asarray(out), (a,),
                   lambda g: (_expand_reduced(g, a.shape, axis, keepdims) / count,))


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = _as_tensor(a)
    inverse = None if axes is None else tuple(np.argsort(axes))
    return _result(np.transpose(a.data, axes), (a,),
                   lambda g: (np.transpose(g, inverse),))


def take(a, indices, axis: int = 0) -> Tensor:
    """Gather slices of ``a`` along ``axis`` (embedding lookup, row slicing)."""
    a = _as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp)
    axis = axis % a.ndim

    def fn(g):
        full = np.zeros_like(a.data)
        moved = np.moveaxis(full, axis, 0)
        np.add.at(moved, idx, np.moveaxis(g, list(range(axis, axis + idx.ndim)),
                                          list(range(idx.ndim))))
        return (full,)

    return _result(np.take(a.data, idx, axis=axis), (a,), fn)


def take_along_axis(a, indices, axis: int) -> Tensor:
    """``np.take_along_axis`` with indices broadcast over trailing axes."""
    a = _as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp)
    while idx.ndim < a.ndim:
        idx = idx[..., None]
    out_shape = list(a.shape)
    out_shape[axis] = idx.shape[axis]
    idx = np.broadcast_to(idx, out_shape)

    def fn(g):
        full = np.zeros_like(a.data)
        np.put_along_axis(full, idx, g, axis=axis)  # indices are unique per row
        return (full,)

    return _result(np.take_along_axis(a.data, idx, axis=axis), (a,), fn)


# -- fused normalisations ----------------------------------------------------

def softmax(x, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)
    return _result(out, (x,),
                   lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),))


def log_softmax(x, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    return _result(out, (x,),
                   lambda g: (g - np.exp(out) * g.sum(axis=axis, keepdims=True),))


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean / unit variance, then ``gamma*x+beta``."""
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    d = x.shape[-1]

    def fn(g):
        gx = ggamma = gbeta = None
        if gamma.requires_grad:
            ggamma = _unbroadcast(g * xhat, gamma.shape)
        if beta.requires_grad:
            gbeta = _unbroadcast(g, beta.shape)
        if x.requires_grad:
            gh = g * gamma.data
            gx = (inv / d) * (d * gh - gh.sum(axis=-1, keepdims=True)
                              - xhat * (gh * xhat).sum(axis=-1, keepdims=True))
        return gx, ggamma, gbeta

    return _result(out, (x, gamma, beta), fn)


def l2_normalize(x, axis: int = -1, eps: float = 1e-12) -> Tensor:
    """Scale to unit L2 norm; ``eps`` under the square root guards zero vectors."""
    x = _as_tensor(x)
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True) + eps)
    out = x.data / norm
    return _result(out, (x,),
                   lambda g: ((g - out * (g * out).sum(axis=axis, keepdims=True)) / norm,))


# -- composed layers -----------------------------------------------------------

def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight + bias`` over the last axis of ``x``, as one 2-D product."""
    x, weight = _as_tensor(x), _as_tensor(weight)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear: cannot multiply shapes {x.shape} and {weight.shape}")
    x2 = x.data.reshape(-1, x.shape[-1])
    out = x2 @ weight.data
    parents = [x, weight]
    if bias is not None:
        bias = _as_tensor(bias)
        out += bias.data
        parents.append(bias)
    out_shape = x.shape[:-1] + (weight.shape[1],)

    def fn(g):
        g2 = g.reshape(-1, weight.shape[1])
        gx = (g2 @ weight.data.T).reshape(x.shape) if x.requires_grad else None
        gw = x2.T @ g2 if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, (g2.sum(axis=0) if bias.requires_grad else None)

    return _result(out.reshape(out_shape), parents, fn)


def embedding(ids, table) -> Tensor:
    return take(table, ids, axis=0)


def mean_pool(x, mask=None) -> Tensor:
    """Mean over axis 1 of ``[B, N, D]``; ``mask`` ``[B, N]`` selects positions."""
    if mask is None:
        return mean(x, axis=1)
    m = np.asarray(mask, dtype=np.float64)
    count = np.maximum(m.sum(axis=1, keepdims=True), 1.0)
    return div(sum(mul(x, m[:, :, None]), axis=1), count)


def parameters_with_grad(tensors: Iterable[Tensor]) -> list[Tensor]:
    return [t for t in tensors if t.requires_grad]
