"""Reverse-mode automatic differentiation on float64 numpy arrays.

Every primitive's vjp is itself assembled from primitives, so a gradient is
an ordinary graph node and can be differentiated again.  Unrolling SGD steps
and taking the gradient of the result (second-order terms included) is then
just one more backward pass over the extended graph.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

Array = np.ndarray


class Var:
    """Graph node wrapping an immutable float64 array."""

    __slots__ = ("data", "requires_grad", "parents")

    def __init__(self, data, requires_grad: bool = False, parents: tuple = ()):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.parents = parents  # tuple of (Var, vjp) pairs

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def sum(self, axis=None, keepdims: bool = False) -> "Var":
        return vsum(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Var":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self) -> "Var":
        return transpose(self)

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

    def __repr__(self):
        return f"Var(shape={self.data.shape}, requires_grad={self.requires_grad})"


def as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def leaf(data) -> Var:
    """Differentiable leaf (a parameter)."""
    return Var(data, requires_grad=True)


def detach(v: Var) -> Var:
    return Var(v.data)


def _node(data, parents: Sequence[tuple]) -> Var:
    live = tuple((p, vjp) for p, vjp in parents if p.requires_grad)
    if not live:
        return Var(data)
    return Var(data, requires_grad=True, parents=live)


def _unbroadcast(g: Var, shape: tuple) -> Var:
    """Reduce gradient g back to `shape` after numpy broadcasting."""
    if g.data.shape == shape:
        return g
    extra = g.data.ndim - len(shape)
    if extra > 0:
        g = vsum(g, axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.data.shape[i] != 1)
    if axes:
        g = vsum(g, axis=axes, keepdims=True)
    return g


def add(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    return _node(a.data + b.data, (
        (a, lambda g: _unbroadcast(g, a.data.shape)),
        (b, lambda g: _unbroadcast(g, b.data.shape)),
    ))


def sub(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    return _node(a.data - b.data, (
        (a, lambda g: _unbroadcast(g, a.data.shape)),
        (b, lambda g: _unbroadcast(neg(g), b.data.shape)),
    ))


def neg(a) -> Var:
    a = as_var(a)
    return _node(-a.data, ((a, lambda g: neg(g)),))


def mul(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    return _node(a.data * b.data, (
        (a, lambda g: _unbroadcast(mul(g, b), a.data.shape)),
        (b, lambda g: _unbroadcast(mul(g, a), b.data.shape)),
    ))


def div(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    return _node(a.data / b.data, (
        (a, lambda g: _unbroadcast(div(g, b), a.data.shape)),
        (b, lambda g: _unbroadcast(neg(div(mul(g, a), mul(b, b))), b.data.shape)),
    ))


def matmul(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    return _node(a.data @ b.data, (
        (a, lambda g: matmul(g, transpose(b))),
        (b, lambda g: matmul(transpose(a), g)),
    ))


def transpose(a) -> Var:
    a = as_var(a)
    if a.ndim != 2:
        raise ValueError("transpose expects a 2-D operand")
    return _node(a.data.T.copy(), ((a, lambda g: transpose(g)),))


def reshape(a, shape) -> Var:
    a = as_var(a)
    old = a.data.shape
    return _node(a.data.reshape(shape), ((a, lambda g: reshape(g, old)),))


def vsum(a, axis=None, keepdims: bool = False) -> Var:
    a = as_var(a)
    data = np.sum(a.data, axis=axis, keepdims=keepdims)
    in_shape = a.data.shape

    def vjp(g: Var) -> Var:
        if axis is None:
            axes = tuple(range(len(in_shape)))
        elif isinstance(axis, int):
            axes = (axis % len(in_shape),)
        else:
            axes = tuple(ax % len(in_shape) for ax in axis)
        mid = g
        if not keepdims:
            kept = list(g.data.shape)
            for ax in sorted(axes):
                kept.insert(ax, 1)
            mid = reshape(g, tuple(kept))
        return broadcast_to(mid, in_shape)

    return _node(data, ((a, vjp),))


def mean(a, axis=None, keepdims: bool = False) -> Var:
    a = as_var(a)
    if axis is None:
        n = a.data.size
    elif isinstance(axis, int):
        n = a.data.shape[axis]
    else:
        n = int(np.prod([a.data.shape[ax] for ax in axis]))
    return div(vsum(a, axis=axis, keepdims=keepdims), float(n))


def broadcast_to(a, shape) -> Var:
    a = as_var(a)
    old = a.data.shape
    return _node(np.broadcast_to(a.data, shape), ((a, lambda g: _unbroadcast(g, old)),))


def exp(a) -> Var:
    a = as_var(a)
    data = np.exp(a.data)
    if not a.requires_grad:
        return Var(data)
    box = []
    out = Var(data, True, ((a, lambda g: mul(g, box[0])),))
    box.append(out)
    return out


def sigmoid(a) -> Var:
    a = as_var(a)
    data = 1.0 / (1.0 + np.exp(-a.data))
    if not a.requires_grad:
        return Var(data)
    box = []
    out = Var(data, True, ((a, lambda g: mul(g, mul(box[0], sub(1.0, box[0])))),))
    box.append(out)
    return out


def silu(a) -> Var:
    a = as_var(a)
    return mul(a, sigmoid(a))


def concat(parts: Sequence, axis: int = 0) -> Var:
    parts = [as_var(p) for p in parts]
    data = np.concatenate([p.data for p in parts], axis=axis)
    edges = []
    offset = 0
    for p in parts:
        size = p.data.shape[axis]
        edges.append((p, (lambda off, sz: lambda g: narrow(g, axis, off, sz))(offset, size)))
        offset += size
    return _node(data, tuple(edges))


def narrow(a, axis: int, start: int, length: int) -> Var:
    a = as_var(a)
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, start + length)
    full = a.data.shape
    return _node(a.data[tuple(idx)].copy(),
                 ((a, lambda g: pad_slice(g, axis, start, full)),))


def pad_slice(a, axis: int, start: int, full_shape: tuple) -> Var:
    a = as_var(a)
    data = np.zeros(full_shape)
    idx = [slice(None)] * len(full_shape)
    idx[axis] = slice(start, start + a.data.shape[axis])
    data[tuple(idx)] = a.data
    length = a.data.shape[axis]
    return _node(data, ((a, lambda g: narrow(g, axis, start, length)),))


def gather_rows(a, idx: Array) -> Var:
    """Row lookup a[idx]; idx is a plain integer array, not differentiable."""
    a = as_var(a)
    idx = np.asarray(idx)
    n_rows = a.data.shape[0]
    return _node(a.data[idx], ((a, lambda g: scatter_rows(g, idx, n_rows)),))


def scatter_rows(g, idx: Array, n_rows: int) -> Var:
    g = as_var(g)
    idx = np.asarray(idx)
    data = np.zeros((n_rows,) + g.data.shape[1:])
    np.add.at(data, idx, g.data)
    return _node(data, ((g, lambda h: gather_rows(h, idx)),))


def dot(a, b) -> Var:
    """Sum of elementwise products over all entries."""
    return vsum(mul(a, b))


def _toposort(root: Var) -> list:
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        v, expanded = stack.pop()
        if expanded:
            order.append(v)
            continue
        if id(v) in seen:
            continue
        seen.add(id(v))
        stack.append((v, True))
        for p, _ in v.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def grad(output: Var, wrt: Sequence[Var], create_graph: bool = True) -> list:
    """Gradients of a scalar output with respect to the given leaves.

    Returned Vars carry their own graph; pass create_graph=False to detach
    them when no further differentiation is needed.
    """
    if output.data.size != 1:
        raise ValueError("grad expects a scalar output")
    grads: dict[int, Var] = {id(output): Var(np.ones_like(output.data))}
    if output.requires_grad:
        for v in reversed(_toposort(output)):
            g = grads.get(id(v))
            if g is None:
                continue
            for p, vjp in v.parents:
                contrib = vjp(g)
                prev = grads.get(id(p))
                grads[id(p)] = contrib if prev is None else add(prev, contrib)
    out = []
    for w in wrt:
        g = grads.get(id(w))
        if g is None:
            g = Var(np.zeros_like(w.data))
        elif not create_graph:
            g = detach(g)
        out.append(g)
    return out


def hvp(f: Callable, inputs: dict, v: dict) -> dict:
    """Hessian-vector product of scalar f at `inputs` with direction `v`.

    f maps a dict of leaf Vars to a scalar Var; inputs and v are dicts of
    arrays with matching keys.
    """
    leaves = {k: leaf(x) for k, x in inputs.items()}
    out = f(leaves)
    gs = grad(out, list(leaves.values()))
    s = None
    for g, key in zip(gs, leaves):
        term = dot(g, Var(v[key]))
        s = term if s is None else add(s, term)
    hs = grad(s, list(leaves.values()), create_graph=False)
    return {k: h.data for k, h in zip(leaves, hs)}
