"""Minimal reverse-mode autodiff engine on float64 numpy arrays.

The backward pass of every operation is itself expressed in terms of
recorded operations, so gradients returned by :func:`grad` are ordinary
graph tensors.  Differentiating a loss that was built from earlier
gradient computations (unrolled inner optimization steps) therefore
needs no special machinery beyond calling :func:`grad` again.
"""

from __future__ import annotations

import contextlib

import numpy as np


class ShapeError(ValueError):
    """Raised when an operation receives shape-incompatible inputs."""


class GraphError(RuntimeError):
    """Raised on invalid gradient requests (non-scalar loss, detached graph)."""


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "_parents", "_vjp", "op_name", "ctx")

    def __init__(self, data, requires_grad=False, _parents=(), _vjp=None, op_name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self._parents = _parents
        self._vjp = _vjp
        self.op_name = op_name
        self.ctx = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor({self.data!r}, requires_grad={self.requires_grad})"

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __neg__(self):
        return neg(self)

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

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return gather(self, idx)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, vjp, name):
    """Create an output tensor, recording the op when grad mode allows it."""
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=parents, _vjp=vjp, op_name=name)
    return Tensor(data)


def _check_broadcast(name, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{name}: incompatible shapes {a.shape} and {b.shape}") from None


def _unbroadcast(g, shape):
    """Reduce a gradient back to the shape of the broadcast input."""
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return tsum(g)
    out = g
    while out.ndim > len(shape):
        out = tsum(out, axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and out.shape[ax] != 1:
            out = tsum(out, axis=ax, keepdims=True)
    return out


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    return _node(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)
    return _node(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(neg(g), b.shape)),
        "sub",
    )


def neg(a):
    a = as_tensor(a)
    return _node(-a.data, (a,), lambda g: (neg(g),), "neg")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)
    return _node(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(mul(g, b), a.shape), _unbroadcast(mul(g, a), b.shape)),
        "mul",
    )


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("div", a, b)
    out = _node(
        a.data / b.data,
        (a, b),
        lambda g: (
            _unbroadcast(div(g, b), a.shape),
            _unbroadcast(neg(div(mul(g, a), mul(b, b))), b.shape),
        ),
        "div",
    )
    return out


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 0 or b.ndim == 0:
        raise ShapeError(f"matmul: scalar operand, shapes {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    data = a.data @ b.data
    if a.ndim == 2 and b.ndim == 2:
        vjp = lambda g: (matmul(g, transpose(b)), matmul(transpose(a), g))
    elif a.ndim == 2 and b.ndim == 1:
        vjp = lambda g: (outer(g, b), matmul(transpose(a), g))
    elif a.ndim == 1 and b.ndim == 2:
        vjp = lambda g: (matmul(b, g), outer(a, g))
    else:  # dot product
        vjp = lambda g: (mul(g, b), mul(g, a))
    return _node(data, (a, b), vjp, "matmul")


def outer(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 1 or b.ndim != 1:
        raise ShapeError(f"outer: expected vectors, got {a.shape} and {b.shape}")
    return _node(
        np.outer(a.data, b.data),
        (a, b),
        lambda g: (matmul(g, b), matmul(a, g)),
        "outer",
    )


def transpose(a):
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose: expected matrix, got {a.shape}")
    return _node(a.data.T, (a,), lambda g: (transpose(g),), "transpose")


def relu(a):
    a = as_tensor(a)
    mask = Tensor((a.data > 0).astype(np.float64))
    return _node(a.data * mask.data, (a,), lambda g: (mul(g, mask),), "relu")


def sigmoid(a):
    a = as_tensor(a)
    s_data = 1.0 / (1.0 + np.exp(-np.clip(a.data, -500.0, 500.0)))
    out = _node(s_data, (a,), None, "sigmoid")
    # use `out` itself in the backward expression so d2/dx2 stays on the graph
    out._vjp = lambda g: (mul(g, mul(out, sub(1.0, out))),)
    return out


def log(a):
    a = as_tensor(a)
    return _node(np.log(a.data), (a,), lambda g: (div(g, a),), "log")


def exp(a):
    a = as_tensor(a)
    out = _node(np.exp(a.data), (a,), None, "exp")
    out._vjp = lambda g: (mul(g, out),)
    return out


def softmax(a, axis=-1):
    """Softmax along ``axis``; -inf entries yield exactly zero probability."""
    a = as_tensor(a)
    shifted = a.data - np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    s_data = e / np.sum(e, axis=axis, keepdims=True)
    out = _node(s_data, (a,), None, "softmax")

    def vjp(g):
        gs = mul(g, out)
        inner = tsum(gs, axis=axis, keepdims=True)
        return (mul(out, sub(g, inner)),)

    out._vjp = vjp
    return out


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    data = np.sum(a.data, axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return (broadcast_to(g, a.shape),)
        gd = g
        if not keepdims:
            gd = reshape(gd, _expanded_shape(a.shape, axis))
        return (broadcast_to(gd, a.shape),)

    return _node(data, (a,), vjp, "sum")


def _expanded_shape(shape, axis):
    out = list(shape)
    out[axis if axis >= 0 else len(shape) + axis] = 1
    return tuple(out)


def tmean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    n = a.data.size if axis is None else a.shape[axis]
    return div(tsum(a, axis=axis, keepdims=keepdims), float(n))


def reshape(a, shape):
    a = as_tensor(a)
    if int(np.prod(shape)) != a.data.size:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {shape}")
    return _node(a.data.reshape(shape), (a,), lambda g: (reshape(g, a.shape),), "reshape")


def broadcast_to(a, shape):
    a = as_tensor(a)
    try:
        data = np.broadcast_to(a.data, shape).copy()
    except ValueError as e:
        raise ShapeError(f"broadcast_to: {a.shape} to {shape}") from e

    def vjp(g):
        extra = g.ndim - a.ndim
        out = g
        for _ in range(extra):
            out = tsum(out, axis=0)
        for ax, n in enumerate(a.shape):
            if n == 1 and shape[ax + extra] != 1:
                out = tsum(out, axis=ax, keepdims=True)
        return (out,)

    return _node(data, (a,), vjp, "broadcast_to")


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    base = list(tensors[0].shape)
    for t in tensors[1:]:
        other = list(t.shape)
        if len(other) != len(base) or any(
            other[i] != base[i] for i in range(len(base)) if i != (axis % len(base))
        ):
            raise ShapeError(
                f"concat: incompatible shapes {[t.shape for t in tensors]} on axis {axis}"
            )
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(
            slice_axis(g, int(offsets[i]), int(offsets[i + 1]), axis)
            for i in range(len(tensors))
        )

    return _node(data, tuple(tensors), vjp, "concat")


def slice_axis(a, start, stop, axis=0):
    a = as_tensor(a)
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    return _node(
        a.data[idx],
        (a,),
        lambda g: (pad_slice(g, a.shape, start, axis),),
        "slice",
    )


def pad_slice(g, full_shape, start, axis=0):
    g = as_tensor(g)
    data = np.zeros(full_shape)
    idx = [slice(None)] * len(full_shape)
    idx[axis] = slice(start, start + g.shape[axis])
    idx = tuple(idx)
    data[idx] = g.data
    return _node(data, (g,), lambda h: (slice_axis(h, start, start + g.shape[axis], axis),), "pad")


def gather(a, idx):
    """Index rows of a matrix (or entries of a vector) along axis 0."""
    a = as_tensor(a)
    idx = np.asarray(idx)
    if idx.dtype.kind not in "iu":
        raise ShapeError(f"gather: non-integer index of dtype {idx.dtype}")
    if idx.size and (idx.min() < -a.shape[0] or idx.max() >= a.shape[0]):
        raise ShapeError(f"gather: index out of range for axis-0 size {a.shape[0]}")
    return _node(a.data[idx], (a,), lambda g: (scatter_add(g, idx, a.shape),), "gather")


def scatter_add(g, idx, full_shape):
    g = as_tensor(g)
    data = np.zeros(full_shape)
    np.add.at(data, np.asarray(idx), g.data)
    return _node(data, (g,), lambda h: (gather(h, idx),), "scatter_add")


def dropout(a, rate, rng=None, mask=None):
    """Train-mode (inverted) dropout.  The mask is stored on ``out.ctx``."""
    a = as_tensor(a)
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout: rate {rate} outside [0, 1)")
    if rate == 0.0 and mask is None:
        out = mul(a, 1.0)
        out.ctx = np.ones(a.shape)
        return out
    if mask is None:
        if rng is None:
            raise ValueError("dropout: need an rng when no mask is given")
        mask = (rng.random(a.shape) >= rate).astype(np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != a.shape:
        raise ShapeError(f"dropout: mask shape {mask.shape} != input shape {a.shape}")
    out = mul(a, Tensor(mask / (1.0 - rate)))
    out.ctx = mask
    return out


def straight_through(p, hard_value):
    """Forward the discrete ``hard_value``; backward is identity onto ``p``."""
    p = as_tensor(p)
    hard_value = np.asarray(hard_value, dtype=np.float64)
    if hard_value.shape != p.shape:
        raise ShapeError(f"straight_through: value shape {hard_value.shape} != {p.shape}")
    return _node(hard_value, (p,), lambda g: (g,), "straight_through")


def custom_op(data, parents, vjp, name):
    """Escape hatch for ops with bespoke forward/backward (e.g. projections)."""
    return _node(data, tuple(as_tensor(p) for p in parents), vjp, name)


def _toposort(root):
    order = []
    visited = set()
    stack = [(root, iter(root._parents))]
    visited.add(id(root))
    while stack:
        node, parents = stack[-1]
        advanced = False
        for p in parents:
            if p.requires_grad and id(p) not in visited:
                visited.add(id(p))
                stack.append((p, iter(p._parents)))
                advanced = True
                break
        if not advanced:
            order.append(node)
            stack.pop()
    return order


def grad(loss, params, create_graph=False, allow_unused=True):
    """Gradients of a scalar loss w.r.t. each tensor in ``params``.

    With ``create_graph`` the returned gradients stay on the graph, so a
    scalar built from them can be differentiated again.
    """
    if loss.data.ndim != 0:
        raise GraphError(f"grad: loss must be scalar, got shape {loss.shape}")
    grads = {id(loss): Tensor(1.0)}
    if loss.requires_grad:
        ctx = contextlib.nullcontext() if create_graph else no_grad()
        with ctx:
            for node in reversed(_toposort(loss)):
                g = grads.get(id(node))
                if g is None or node._vjp is None:
                    continue
                parent_grads = node._vjp(g)
                for p, pg in zip(node._parents, parent_grads):
                    if not p.requires_grad:
                        continue
                    acc = grads.get(id(p))
                    grads[id(p)] = pg if acc is None else add(acc, pg)
    out = []
    for p in params:
        g = grads.get(id(p))
        if g is None:
            if not allow_unused:
                raise GraphError("grad: a parameter is not reachable from the loss")
            g = Tensor(np.zeros(p.shape))
        out.append(g)
    return out


def grad_through_grad(outer_loss, params):
    """Gradient of a loss built on top of earlier ``grad(..., create_graph=True)``
    results; rejects graphs where the inner steps were recorded detached."""
    try:
        return grad(outer_loss, params, create_graph=False, allow_unused=False)
    except GraphError as e:
        raise GraphError(
            "grad_through_grad: outer loss is not connected to the parameters; "
            "inner gradient steps were likely recorded in no-grad mode"
        ) from e


def zeros(shape, requires_grad=False):
    return Tensor(np.zeros(shape), requires_grad=requires_grad)
