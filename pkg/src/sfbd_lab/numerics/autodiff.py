"""Minimal reverse-mode differentiation over numpy arrays.

Every differentiable value is a :class:`Var`. Primitives record a closure
that maps the output cotangent to input cotangents; :func:`grad_params`
replays them in reverse topological order. Only the primitives registered in
``PRIMITIVES`` may touch a ``Var``: any other numpy ufunc applied to one raises
:class:`~sfbd_lab.errors.UnsupportedOpError` instead of silently dropping the
gradient.
"""

from __future__ import annotations

import numpy as np

from ..errors import UnsupportedOpError

__all__ = [
    "Var",
    "PRIMITIVES",
    "grad_params",
    "value_and_grad",
    "softplus",
    "tanh",
    "square",
    "mean",
    "total",
    "affine",
    "detach",
    "value_of",
]


class Var:
    """A node on the tape."""

    __slots__ = ("value", "parents", "op")

    def __init__(self, value, parents=(), op="leaf"):
        self.value = np.asarray(value, dtype=np.float64)
        # tuple of (parent Var, function cotangent -> parent cotangent)
        self.parents = parents
        self.op = op

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return f"Var(op={self.op}, shape={self.value.shape})"

    def __len__(self):
        return len(self.value)

    # numpy interop: ndarray (op) Var dispatches here instead of elementwise
    # iteration. Registered ufuncs route to tape primitives, anything else is
    # refused.
    def __array_ufunc__(self, ufunc, method, *inputs, **kwargs):
        if method == "__call__" and not kwargs:
            rule = _UFUNC_RULES.get(ufunc)
            if rule is not None:
                return rule(*inputs)
        raise UnsupportedOpError(
            f"numpy ufunc {ufunc.__name__!r} ({method}) has no reverse-mode rule"
        )

    def __array_function__(self, func, types, args, kwargs):
        raise UnsupportedOpError(
            f"numpy function {func.__name__!r} has no reverse-mode rule"
        )

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

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Var):
            raise UnsupportedOpError("division by a Var is not registered")
        return mul(self, 1.0 / np.asarray(other, dtype=np.float64))

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 else shape)

    def sum(self, axis=None):
        return total(self, axis)

    def mean(self):
        return mean(self)


def value_of(x):
    """Raw array behind ``x`` (identity for arrays)."""
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


def detach(x):
    """Array copy of ``x`` with no tape history (a stop-gradient)."""
    return value_of(x).copy()


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _node(value, op, *links):
    parents = tuple((p, fn) for p, fn in links if isinstance(p, Var))
    if not parents:
        return np.asarray(value, dtype=np.float64)
    return Var(value, parents, op)


def add(a, b):
    va, vb = value_of(a), value_of(b)
    return _node(
        va + vb,
        "add",
        (a, lambda g: _unbroadcast(g, va.shape)),
        (b, lambda g: _unbroadcast(g, vb.shape)),
    )


def sub(a, b):
    va, vb = value_of(a), value_of(b)
    return _node(
        va - vb,
        "sub",
        (a, lambda g: _unbroadcast(g, va.shape)),
        (b, lambda g: -_unbroadcast(g, vb.shape)),
    )


def mul(a, b):
    va, vb = value_of(a), value_of(b)
    return _node(
        va * vb,
        "mul",
        (a, lambda g: _unbroadcast(g * vb, va.shape)),
        (b, lambda g: _unbroadcast(g * va, vb.shape)),
    )


def matmul(a, b):
    va, vb = value_of(a), value_of(b)
    if va.ndim != 2 or vb.ndim != 2:
        raise UnsupportedOpError("matmul is registered for 2-D operands only")
    return _node(
        va @ vb,
        "matmul",
        (a, lambda g: g @ vb.T),
        (b, lambda g: va.T @ g),
    )


def affine(x, weight, bias):
    """``x @ weight + bias`` as one primitive."""
    vx, vw, vb = value_of(x), value_of(weight), value_of(bias)
    return _node(
        vx @ vw + vb,
        "affine",
        (x, lambda g: g @ vw.T),
        (weight, lambda g: vx.T @ g),
        (bias, lambda g: g.sum(axis=0)),
    )


def softplus(x):
    """Smooth ReLU ``log(1 + exp(x))``."""
    vx = value_of(x)
    out = np.logaddexp(0.0, vx)
    # sigmoid(x) written to stay finite for large |x|
    sig = np.exp(vx - out)
    return _node(out, "softplus", (x, lambda g: g * sig))


def tanh(x):
    vx = value_of(x)
    out = np.tanh(vx)
    return _node(out, "tanh", (x, lambda g: g * (1.0 - out * out)))


def square(x):
    vx = value_of(x)
    return _node(vx * vx, "square", (x, lambda g: 2.0 * g * vx))


def total(x, axis=None):
    vx = value_of(x)
    out = vx.sum(axis=axis)

    def back(g):
        if axis is None:
            return np.broadcast_to(g, vx.shape).copy()
        return np.broadcast_to(np.expand_dims(g, axis), vx.shape).copy()

    return _node(out, "sum", (x, back))


def mean(x):
    vx = value_of(x)
    n = vx.size
    return _node(vx.mean(), "mean", (x, lambda g: np.full(vx.shape, g / n)))


def getitem(x, key):
    vx = value_of(x)

    parts = key if isinstance(key, tuple) else (key,)
    basic = all(isinstance(k, (slice, int)) for k in parts)

    def back(g):
        out = np.zeros_like(vx)
        if basic:
            out[key] = g
        else:
            np.add.at(out, key, g)
        return out

    return _node(vx[key], "getitem", (x, back))


def reshape(x, shape):
    vx = value_of(x)
    return _node(vx.reshape(shape), "reshape", (x, lambda g: g.reshape(vx.shape)))


PRIMITIVES = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "matmul": matmul,
    "affine": affine,
    "softplus": softplus,
    "tanh": tanh,
    "square": square,
    "sum": total,
    "mean": mean,
    "getitem": getitem,
    "reshape": reshape,
}

_UFUNC_RULES = {
    np.add: add,
    np.subtract: sub,
    np.multiply: mul,
    np.matmul: matmul,
    np.tanh: tanh,
    np.square: square,
    np.negative: lambda a: mul(a, -1.0),
}


def _backward(root, leaf):
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _ in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))

    grads = {id(root): np.ones_like(root.value)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None or node is leaf:
            if node is leaf and g is not None:
                grads[id(leaf)] = g
            continue
        for parent, fn in node.parents:
            contrib = fn(g)
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + contrib
            else:
                grads[key] = contrib
    return grads.get(id(leaf), np.zeros_like(leaf.value))


def value_and_grad(loss_fn, params):
    """Evaluate ``loss_fn(Var(params))`` and its gradient w.r.t. ``params``.

    ``loss_fn`` must return a scalar built from registered primitives (or a
    plain number, in which case the gradient is zero).
    """
    leaf = Var(np.array(params, dtype=np.float64, copy=True))
    out = loss_fn(leaf)
    if not isinstance(out, Var):
        value = np.asarray(out, dtype=np.float64)
        if value.size != 1:
            raise ValueError("loss must be a scalar")
        return float(value), np.zeros_like(leaf.value)
    if out.value.size != 1:
        raise ValueError(f"loss must be a scalar, got shape {out.value.shape}")
    return float(out.value), _backward(out, leaf)


def grad_params(loss_fn, params):
    """Gradient of a scalar tape program with respect to ``params``."""
    return value_and_grad(loss_fn, params)[1]
