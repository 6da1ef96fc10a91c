"""Minimal reverse-mode automatic differentiation on float64 numpy buffers.

Tensors hold a dense ndarray plus an optional gradient buffer. Every
differentiable operation records its parents and a closure that maps the
output gradient to parent gradients; `Tensor.backward()` walks the graph in
reverse topological order and accumulates gradients into `requires_grad`
leaves. Repeated backward calls accumulate until the grads are zeroed.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, DegenerateInputError, ShapeError


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad=False, _parents=(), _backward_fn=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad) or any(
            p.requires_grad for p in _parents
        )
        self.grad = None
        self._parents = tuple(_parents)
        self._backward_fn = _backward_fn

    # -- bookkeeping ---------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- backward pass -------------------------------------------------------

    def backward(self):
        if self.data.size != 1:
            raise ContractError(
                f"backward requires a scalar loss, got shape {self.data.shape}"
            )
        if self._backward_fn is None:
            raise ContractError("backward on a graph-free tensor is rejected")
        if not self.requires_grad:
            raise ContractError("loss does not depend on any requires_grad tensor")

        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward_fn is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward_fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                prev = grads.get(id(parent))
                grads[id(parent)] = pg if prev is None else prev + pg

    # -- operator sugar ------------------------------------------------------

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __neg__(self):
        return mul(self, _as_tensor(-1.0))

    def __matmul__(self, other):
        return matmul(self, other)

    def __abs__(self):
        return absolute(self)

    @property
    def T(self):
        return transpose(self)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g, shape):
    """Sum a gradient down to the shape it was broadcast from."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# -- primitive operations ----------------------------------------------------


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    return Tensor(
        a.data + b.data,
        _parents=(a, b),
        _backward_fn=lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    return Tensor(
        a.data - b.data,
        _parents=(a, b),
        _backward_fn=lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    return Tensor(
        a.data * b.data,
        _parents=(a, b),
        _backward_fn=lambda g: (
            _unbroadcast(g * b.data, a.shape),
            _unbroadcast(g * a.data, b.shape),
        ),
    )


def matmul(a, b):
    if a.data.shape[-1] != b.data.shape[0]:
        raise ShapeError(
            f"matmul mismatch: {a.data.shape} @ {b.data.shape}"
        )
    return Tensor(
        a.data @ b.data,
        _parents=(a, b),
        _backward_fn=lambda g: (g @ b.data.T, a.data.T @ g),
    )


def transpose(a):
    return Tensor(a.data.T, _parents=(a,), _backward_fn=lambda g: (g.T,))


def relu(a):
    mask = a.data > 0
    return Tensor(
        np.where(mask, a.data, 0.0),
        _parents=(a,),
        _backward_fn=lambda g: (g * mask,),
    )


def absolute(a):
    return Tensor(
        np.abs(a.data),
        _parents=(a,),
        _backward_fn=lambda g: (g * np.sign(a.data),),
    )


def tensor_sum(a, axis=None, keepdims=False):
    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.shape).copy(),)

    return Tensor(a.data.sum(axis=axis, keepdims=keepdims), _parents=(a,), _backward_fn=backward)


def mean(a, axis=None, keepdims=False):
    n = a.data.size if axis is None else a.data.shape[axis]
    return tensor_sum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def gather_rows(a, indices):
    idx = np.asarray(indices, dtype=np.intp)

    def backward(g):
        out = np.zeros_like(a.data)
        np.add.at(out, idx, g)
        return (out,)

    return Tensor(a.data[idx], _parents=(a,), _backward_fn=backward)


def segment_mean(a, segment_ids, num_segments):
    """Mean of a 1-d tensor's entries grouped by segment id.

    Segments with no entries yield 0.
    """
    seg = np.asarray(segment_ids, dtype=np.intp)
    counts = np.bincount(seg, minlength=num_segments).astype(np.float64)
    safe = np.maximum(counts, 1.0)
    sums = np.bincount(seg, weights=a.data, minlength=num_segments)

    def backward(g):
        return (g[seg] / safe[seg],)

    return Tensor(sums / safe, _parents=(a,), _backward_fn=backward)


def l2_normalize(a):
    """Scale every row of a [B, D] tensor to unit Euclidean norm."""
    norms = np.linalg.norm(a.data, axis=-1, keepdims=True)
    if np.any(norms == 0.0):
        raise DegenerateInputError("l2_normalize received an all-zero row")
    out = a.data / norms

    def backward(g):
        dot = np.sum(g * a.data, axis=-1, keepdims=True)
        return (g / norms - a.data * dot / norms**3,)

    return Tensor(out, _parents=(a,), _backward_fn=backward)


def finite_difference_grad(fn, x, eps=1e-5):
    """Central finite-difference gradient of scalar fn at ndarray x.

    Independent oracle for gradient checks; never touches the graph machinery.
    """
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = fn(x)
        flat[i] = orig - eps
        lo = fn(x)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * eps)
    return g
