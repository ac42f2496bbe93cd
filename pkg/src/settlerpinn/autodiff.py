"""Array-level reverse-mode automatic differentiation.

A :class:`Var` wraps a numpy array and remembers how it was computed.  Only the
primitives needed by the MLP and the settler losses are supported; applying
anything else (for example a raw numpy ufunc) to a ``Var`` raises ``TypeError``
instead of silently dropping the derivative.

The helpers at the bottom (:func:`tanh`, :func:`sqrt`, ...) accept either plain
arrays or ``Var`` objects, so the same model code runs for fast inference and
for differentiation.  Forward-mode tangents are ordinary expressions built from
these primitives; when they are built from ``Var`` objects the tape also records
them, which gives forward-over-reverse derivatives for free.
"""

from __future__ import annotations

import numpy as np


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    ndim_extra = grad.ndim - len(shape)
    if ndim_extra > 0:
        grad = grad.sum(axis=tuple(range(ndim_extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Var:
    """Node of the computational tape."""

    __slots__ = ("value", "parents", "backward")
    __array_ufunc__ = None  # numpy functions must not see through a Var

    def __init__(self, value, parents=(), backward=None):
        self.value = np.asarray(value, dtype=float)
        self.parents = parents
        self.backward = backward  # g -> tuple of parent contributions

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __len__(self):
        return len(self.value)

    def __repr__(self):
        return f"Var({self.value!r})"

    # -- arithmetic -------------------------------------------------------
    def __add__(self, other):
        other_v = _value(other)
        out = self.value + other_v
        if isinstance(other, Var):
            return Var(out, (self, other), lambda g: (
                _unbroadcast(g, self.shape), _unbroadcast(g, other.shape)))
        return Var(out, (self,), lambda g: (_unbroadcast(g, self.shape),))

    __radd__ = __add__

    def __neg__(self):
        return Var(-self.value, (self,), lambda g: (-g,))

    def __sub__(self, other):
        return self + (-other if isinstance(other, Var) else -np.asarray(other, dtype=float))

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        other_v = _value(other)
        out = self.value * other_v
        if isinstance(other, Var):
            return Var(out, (self, other), lambda g: (
                _unbroadcast(g * other.value, self.shape),
                _unbroadcast(g * self.value, other.shape)))
        return Var(out, (self,), lambda g: (_unbroadcast(g * other_v, self.shape),))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Var):
            return self * other ** -1
        return self * (1.0 / np.asarray(other, dtype=float))

    def __rtruediv__(self, other):
        return other * self ** -1

    def __pow__(self, exponent):
        if isinstance(exponent, Var) or not np.isscalar(exponent):
            raise TypeError("Var ** only supports constant scalar exponents")
        p = float(exponent)
        x = self.value
        return Var(x ** p, (self,), lambda g: (g * p * x ** (p - 1.0),))

    def __matmul__(self, other):
        if isinstance(other, Var):
            return Var(self.value @ other.value, (self, other), lambda g: (
                g @ other.value.T, self.value.T @ g))
        other_v = np.asarray(other, dtype=float)
        return Var(self.value @ other_v, (self,), lambda g: (g @ other_v.T,))

    def __rmatmul__(self, other):
        other_v = np.asarray(other, dtype=float)
        return Var(other_v @ self.value, (self,), lambda g: (other_v.T @ g,))

    def __getitem__(self, index):
        shape = self.shape

        basic = all(isinstance(i, (int, slice)) or i is None or i is Ellipsis
                    for i in (index if isinstance(index, tuple) else (index,)))

        def back(g):
            full = np.zeros(shape)
            if basic:
                full[index] = g
            else:
                np.add.at(full, index, g)
            return (full,)

        return Var(self.value[index], (self,), back)

    # -- reductions / reshaping ------------------------------------------
    def sum(self, axis=None):
        shape = self.shape

        def back(g):
            if axis is not None:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return Var(self.value.sum(axis=axis), (self,), back)

    def mean(self, axis=None):
        n = self.value.size if axis is None else self.shape[axis]
        return self.sum(axis) * (1.0 / n)

    def reshape(self, *shape):
        old = self.shape
        return Var(self.value.reshape(*shape), (self,), lambda g: (g.reshape(old),))

    @property
    def T(self):
        return Var(self.value.T, (self,), lambda g: (g.T,))


def _value(x):
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=float)


def value(x):
    """Plain array held by ``x`` (identity for arrays)."""
    return _value(x)


# ---------------------------------------------------------------------------
# elementwise primitives (array or Var)
# ---------------------------------------------------------------------------


def tanh(x):
    if not isinstance(x, Var):
        return np.tanh(x)
    y = np.tanh(x.value)
    return Var(y, (x,), lambda g: (g * (1.0 - y * y),))


def sigmoid(x):
    if not isinstance(x, Var):
        return _sigmoid(np.asarray(x, dtype=float))
    y = _sigmoid(x.value)
    return Var(y, (x,), lambda g: (g * y * (1.0 - y),))


def _sigmoid(x):
    # split to avoid overflow in exp for large |x|
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sqrt(x):
    if not isinstance(x, Var):
        return np.sqrt(x)
    y = np.sqrt(x.value)
    return Var(y, (x,), lambda g: (g * 0.5 / y,))


def square(x):
    if not isinstance(x, Var):
        return np.square(x)
    v = x.value
    return Var(v * v, (x,), lambda g: (2.0 * g * v,))


def maximum(x, floor):
    """``max(x, floor)`` for a constant ``floor``; zero slope where clamped."""
    if isinstance(floor, Var):
        raise TypeError("maximum() supports a constant floor only")
    if not isinstance(x, Var):
        return np.maximum(x, floor)
    mask = x.value >= floor
    return Var(np.maximum(x.value, floor), (x,), lambda g: (g * mask,))


def stack(items, axis=-1):
    """``np.stack`` for a mix of arrays and ``Var`` objects."""
    if not any(isinstance(v, Var) for v in items):
        return np.stack([np.asarray(v, dtype=float) for v in items], axis=axis)
    vals = [_value(v) for v in items]
    out = np.stack(vals, axis=axis)
    ax = axis if axis >= 0 else out.ndim + axis
    parents = tuple(v for v in items if isinstance(v, Var))
    idx = [i for i, v in enumerate(items) if isinstance(v, Var)]

    def back(g):
        return tuple(np.take(g, i, axis=ax) for i in idx)

    return Var(out, parents, back)


def sum(x, axis=None):  # noqa: A001 - mirrors numpy naming
    return x.sum(axis) if isinstance(x, Var) else np.sum(x, axis=axis)


def mean(x, axis=None):
    return x.mean(axis) if isinstance(x, Var) else np.mean(x, axis=axis)


# ---------------------------------------------------------------------------
# reverse sweep
# ---------------------------------------------------------------------------


def _topological(root):
    order, seen = [], set()
    stack_ = [(root, False)]
    while stack_:
        node, done = stack_.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack_.append((p, False))
    return order


def grad(output, wrt, seed=None):
    """Gradients of ``output`` with respect to each ``Var`` in ``wrt``.

    ``output`` is normally a scalar; for non-scalar outputs ``seed`` gives the
    cotangent (vector-Jacobian product).  Nodes are never mutated, so several
    sweeps can share one tape.
    """
    if not isinstance(output, Var):
        return [np.zeros_like(w.value) for w in wrt]
    if seed is None:
        if output.value.size != 1:
            raise ValueError("grad of a non-scalar output needs a seed")
        seed = np.ones_like(output.value)
    grads = {id(output): np.asarray(seed, dtype=float)}
    for node in reversed(_topological(output)):
        g = grads.get(id(node))
        if g is None or node.backward is None:
            continue
        for parent, contrib in zip(node.parents, node.backward(g)):
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + contrib
            else:
                grads[key] = contrib
    return [grads.get(id(w), np.zeros_like(w.value)) for w in wrt]
