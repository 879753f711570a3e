"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Every network and loss in the package is built from the primitives here.
Evaluation is eager: building an expression computes its value, and
:meth:`Value.backward` walks the recorded graph in reverse topological order.
"""

from __future__ import annotations

from typing import Callable, Iterable, Mapping, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible for a primitive."""

    def __init__(self, primitive: str, *shapes: tuple[int, ...], detail: str = ""):
        self.primitive = primitive
        self.shapes = shapes
        msg = f"{primitive}: incompatible shapes {' and '.join(str(s) for s in shapes)}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class NonFiniteError(FloatingPointError):
    """A primitive produced NaN or Inf."""

    def __init__(self, primitive: str):
        self.primitive = primitive
        super().__init__(f"{primitive}: non-finite value produced")


class GradientError(RuntimeError):
    pass


def _check(primitive: str, out: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(primitive)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    ndim_extra = grad.ndim - len(shape)
    if ndim_extra > 0:
        grad = grad.sum(axis=tuple(range(ndim_extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Value:
    """A node of the differentiation graph: forward value plus accumulated gradient."""

    __slots__ = ("data", "grad", "parents", "backward_fn", "op", "requires_grad")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf"):
        arr = np.array(data, dtype=np.float64)
        _check(op, arr)
        self.data = arr
        self.grad = np.zeros_like(arr)
        self.parents: tuple[Value, ...] = ()
        self.backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = op
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self) -> str:
        return f"Value(op={self.op}, shape={self.shape})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def backward(self) -> None:
        """Accumulate d(self)/d(node) into ``node.grad`` for every ancestor."""
        if self.data.size != 1:
            raise GradientError(f"backward requires a scalar output, got shape {self.shape}")
        order = _topological_order(self)
        for node in order:
            node.grad = None
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            if node.backward_fn is None:
                continue
            parent_grads = node.backward_fn(node.grad)
            for parent, g in zip(node.parents, parent_grads):
                if g is None or not parent.requires_grad:
                    continue
                parent.grad = g if parent.grad is None else parent.grad + g

    # operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return vsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _topological_order(root: Value) -> list[Value]:
    order: list[Value] = []
    seen: set[int] = set()
    stack: list[tuple[Value, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def as_value(x) -> Value:
    return x if isinstance(x, Value) else Value(x)


def _make(op: str, data: np.ndarray, parents: Sequence[Value], backward_fn) -> Value:
    _check(op, data)
    out = Value.__new__(Value)
    out.data = data
    out.grad = None
    out.op = op
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out.parents = tuple(parents)
        out.backward_fn = backward_fn
    else:
        out.parents = ()
        out.backward_fn = None
    return out


def _broadcast_shape(op: str, a: Value, b: Value) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# elementwise arithmetic ----------------------------------------------------

def add(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    _broadcast_shape("add", a, b)
    return _make("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    _broadcast_shape("sub", a, b)
    return _make("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    _broadcast_shape("mul", a, b)
    return _make("mul", a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    _broadcast_shape("div", a, b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data

    def backward(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make("div", out, (a, b), backward)


def neg(a) -> Value:
    a = as_value(a)
    return _make("neg", -a.data, (a,), lambda g: (-g,))


def scale(a, c: float) -> Value:
    """Multiply by a constant scalar."""
    a = as_value(a)
    c = float(c)
    return _make("scale", a.data * c, (a,), lambda g: (g * c,))


def square(a) -> Value:
    a = as_value(a)
    return _make("square", a.data * a.data, (a,), lambda g: (2.0 * a.data * g,))


def sqrt(a) -> Value:
    a = as_value(a)
    if np.any(a.data < 0):
        raise NonFiniteError("sqrt")
    out = np.sqrt(a.data)

    def backward(g):
        with np.errstate(divide="ignore"):
            return (g * 0.5 / out,)

    return _make("sqrt", out, (a,), backward)


def exp(a) -> Value:
    a = as_value(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _make("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Value:
    a = as_value(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _make("log", out, (a,), lambda g: (g / a.data,))


def elu(a, alpha: float = 1.0) -> Value:
    a = as_value(a)
    x = a.data
    neg_mask = x < 0
    out = x.copy()
    out[neg_mask] = alpha * np.expm1(x[neg_mask])
    deriv = np.ones_like(x)
    deriv[neg_mask] = out[neg_mask] + alpha
    return _make("elu", out, (a,), lambda g: (g * deriv,))


def sigmoid(a) -> Value:
    a = as_value(a)
    x = a.data
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def log_sigmoid(a) -> Value:
    """log(sigmoid(x)) evaluated without overflow."""
    a = as_value(a)
    x = a.data
    out = np.minimum(x, 0.0) - np.log1p(np.exp(-np.abs(x)))
    e = np.exp(-np.abs(x))
    sig_neg = np.where(x >= 0, e / (1.0 + e), 1.0 / (1.0 + e))  # sigmoid(-x)
    return _make("log_sigmoid", out, (a,), lambda g: (g * sig_neg,))


# shape and reductions ------------------------------------------------------

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def vsum(a, axis=None, keepdims: bool = False) -> Value:
    a = as_value(a)
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make("sum", np.asarray(out), (a,), backward)


def mean(a, axis=None, keepdims: bool = False) -> Value:
    a = as_value(a)
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    if count == 0:
        raise ShapeError("mean", a.shape, detail="empty reduction")
    return scale(vsum(a, axis=axes, keepdims=keepdims), 1.0 / count)


def variance(a, axis=None, keepdims: bool = False) -> Value:
    """Population variance (divides by N)."""
    a = as_value(a)
    mu = mean(a, axis=axis, keepdims=True)
    return mean(square(a - mu), axis=axis, keepdims=keepdims)


def reshape(a, shape) -> Value:
    a = as_value(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, tuple(shape)) from None
    return _make("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Value:
    a = as_value(a)
    out = np.transpose(a.data, axes)
    inv = None if axes is None else tuple(np.argsort(axes))
    return _make("transpose", out, (a,), lambda g: (np.transpose(g, inv),))


def getitem(a, index) -> Value:
    a = as_value(a)
    out = a.data[index]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _make("getitem", np.array(out, dtype=np.float64), (a,), backward)


def concat(values: Sequence, axis: int = 0) -> Value:
    vals = [as_value(v) for v in values]
    try:
        out = np.concatenate([v.data for v in vals], axis=axis)
    except ValueError:
        raise ShapeError("concat", *(v.shape for v in vals)) from None
    sizes = np.cumsum([v.shape[axis] for v in vals])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _make("concat", out, vals, backward)


def matmul(a, b) -> Value:
    """``a @ b`` with ``b`` 2-D (or both batched with equal leading shape)."""
    a, b = as_value(a), as_value(b)
    if a.ndim < 1 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    out = a.data @ b.data

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        if b.ndim == 2:
            a2 = a.data.reshape(-1, a.shape[-1])
            gb = a2.T @ g.reshape(-1, g.shape[-1])
        else:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return _unbroadcast(ga, a.shape), gb

    return _make("matmul", out, (a, b), backward)


# normalizations ------------------------------------------------------------

def logsumexp(a, axis: int = -1, keepdims: bool = False) -> Value:
    a = as_value(a)
    m = a.data.max(axis=axis, keepdims=True)
    shifted = np.exp(a.data - m)
    s = shifted.sum(axis=axis, keepdims=True)
    out = np.log(s) + m
    soft = shifted / s
    if not keepdims:
        out = np.squeeze(out, axis=axis)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * soft,)

    return _make("logsumexp", out, (a,), backward)


def softmax(a, axis: int = -1) -> Value:
    a = as_value(a)
    shifted = np.exp(a.data - a.data.max(axis=axis, keepdims=True))
    out = shifted / shifted.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make("softmax", out, (a,), backward)


def log_softmax(a, axis: int = -1) -> Value:
    a = as_value(a)
    return a - logsumexp(a, axis=axis, keepdims=True)


def l2_normalize(a, axis: int = -1) -> Value:
    a = as_value(a)
    norm = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True))
    if np.any(norm == 0.0):
        raise NonFiniteError("l2_normalize")
    out = a.data / norm

    def backward(g):
        return ((g - out * (g * out).sum(axis=axis, keepdims=True)) / norm,)

    return _make("l2_normalize", out, (a,), backward)


def batch_norm(x, gamma, beta, *, train: bool, running_mean: np.ndarray,
               running_var: np.ndarray, momentum: float = 0.1, eps: float = 1e-5):
    """Per-feature normalization over every axis except the last.

    Returns ``(output, (new_running_mean, new_running_var))``. In inference
    mode the running statistics are used and returned unchanged.
    """
    x, gamma, beta = as_value(x), as_value(gamma), as_value(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,) or running_mean.shape != (d,):
        raise ShapeError("batch_norm", x.shape, gamma.shape)
    axes = tuple(range(x.ndim - 1))
    if not train:
        inv = 1.0 / np.sqrt(running_var + eps)
        xhat = (x.data - running_mean) * inv
        out = xhat * gamma.data + beta.data

        def backward_eval(g):
            return (g * gamma.data * inv,
                    (g * xhat).sum(axis=axes),
                    g.sum(axis=axes))

        return _make("batch_norm", out, (x, gamma, beta), backward_eval), (running_mean, running_var)

    n = int(np.prod([x.shape[ax] for ax in axes]))
    mu = x.data.mean(axis=axes)
    centered = x.data - mu
    var = np.mean(centered * centered, axis=axes)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        gxhat = g * gamma.data
        gx = inv * (gxhat - gxhat.mean(axis=axes) - xhat * (gxhat * xhat).mean(axis=axes))
        return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    unbiased = var * n / max(n - 1, 1)
    new_mean = (1.0 - momentum) * running_mean + momentum * mu
    new_var = (1.0 - momentum) * running_var + momentum * unbiased
    return _make("batch_norm", out, (x, gamma, beta), backward), (new_mean, new_var)


# functional entry points ---------------------------------------------------

def evaluate(fn: Callable[..., Value], inputs: Mapping[str, np.ndarray]) -> np.ndarray:
    """Forward value of ``fn(**inputs)`` without recording gradients."""
    vals = {k: Value(v) for k, v in inputs.items()}
    return fn(**vals).data


def value_and_grad(fn: Callable[..., Value], inputs: Mapping[str, np.ndarray],
                   wrt: Iterable[str] | None = None) -> tuple[float, dict[str, np.ndarray]]:
    """Scalar value of ``fn(**inputs)`` and its gradient for each input in ``wrt``.

    Inputs not reached by the graph get exact zero gradients.
    """
    wrt = set(inputs) if wrt is None else set(wrt)
    vals = {k: Value(v, requires_grad=k in wrt) for k, v in inputs.items()}
    out = fn(**vals)
    if not isinstance(out, Value):
        raise GradientError("function must return a Value")
    out.backward()
    return out.item(), {k: vals[k].grad.copy() for k in sorted(wrt)}


def numerical_grad(fn: Callable[..., Value], inputs: Mapping[str, np.ndarray],
                   name: str, step: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient of a scalar ``fn`` w.r.t. one input."""
    base = {k: np.array(v, dtype=np.float64) for k, v in inputs.items()}
    x = base[name]
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + step
        fp = evaluate(fn, base)
        x[idx] = orig - step
        fm = evaluate(fn, base)
        x[idx] = orig
        grad[idx] = (float(fp) - float(fm)) / (2.0 * step)
    return grad
