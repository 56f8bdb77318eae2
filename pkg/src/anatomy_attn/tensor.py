"""Minimal dense fp64 tensor with reverse-mode automatic differentiation.

Shapes are plain tuples, rank <= 4, with the N x C x H x W layout used for
feature maps. Every op validates that its output is finite; NaN/Inf raises
NonFiniteError instead of propagating silently.
"""

from __future__ import annotations

import numpy as np


class NonFiniteError(ArithmeticError):
    """An op produced NaN or Inf."""


def _check_finite(data: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite values produced by op '{op}'")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcasted gradient back to `shape`."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


class Tensor:
    """Dense fp64 array with optional gradient tracking.

    A Tensor is immutable once produced by an op except for its `grad`
    buffer. The graph built by ops is confined to one thread of execution.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        if self.data.ndim > 4:
            raise ValueError(f"rank {self.data.ndim} > 4 not supported")
        _check_finite(self.data, "tensor")
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = ()
        self._backward_fn = None

    # -- construction helpers -------------------------------------------------

    @classmethod
    def _from_op(cls, data, parents, backward_fn, op: str) -> "Tensor":
        data = np.asarray(data, dtype=np.float64)
        _check_finite(data, op)
        out = cls.__new__(cls)
        out.data = data
        out.requires_grad = False
        out.grad = None
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- autodiff -------------------------------------------------------------

    def backward(self, grad=None) -> None:
        """Reverse-mode sweep from this tensor through its graph."""
        if grad is None:
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=np.float64)

        topo, visited = [], set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))

        grads = {id(self): grad}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            if node._backward_fn is None:
                continue
            for parent, pg in node._backward_fn(g):
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- elementwise ops ------------------------------------------------------

    def __add__(self, other):
        other = _as_tensor(other)
        out_data = self.data + other.data

        def bwd(g):
            return [(self, _unbroadcast(g, self.shape)),
                    (other, _unbroadcast(g, other.shape))]

        return Tensor._from_op(out_data, (self, other), bwd, "add")

    __radd__ = __add__

    def __neg__(self):
        return Tensor._from_op(-self.data, (self,), lambda g: [(self, -g)], "neg")

    def __sub__(self, other):
        return self + (-_as_tensor(other))

    def __rsub__(self, other):
        return _as_tensor(other) + (-self)

    def __mul__(self, other):
        other = _as_tensor(other)
        out_data = self.data * other.data

        def bwd(g):
            return [(self, _unbroadcast(g * other.data, self.shape)),
                    (other, _unbroadcast(g * self.data, other.shape))]

        return Tensor._from_op(out_data, (self, other), bwd, "mul")

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _as_tensor(other)
        with np.errstate(all="ignore"):  # finiteness checked in _from_op
            out_data = self.data / other.data

        def bwd(g):
            return [(self, _unbroadcast(g / other.data, self.shape)),
                    (other, _unbroadcast(-g * self.data / other.data ** 2,
                                         other.shape))]

        return Tensor._from_op(out_data, (self, other), bwd, "div")

    def __rtruediv__(self, other):
        return _as_tensor(other) / self

    def __pow__(self, exponent: float):
        with np.errstate(all="ignore"):
            out_data = self.data ** exponent

        def bwd(g):
            return [(self, g * exponent * self.data ** (exponent - 1))]

        return Tensor._from_op(out_data, (self,), bwd, "pow")

    def exp(self):
        with np.errstate(all="ignore"):
            out_data = np.exp(self.data)

        def bwd(g):
            return [(self, g * out_data)]

        return Tensor._from_op(out_data, (self,), bwd, "exp")

    def log(self):
        with np.errstate(all="ignore"):
            out_data = np.log(self.data)

        def bwd(g):
            return [(self, g / self.data)]

        return Tensor._from_op(out_data, (self,), bwd, "log")

    def sqrt(self):
        with np.errstate(all="ignore"):
            out_data = np.sqrt(self.data)

        def bwd(g):
            return [(self, g * 0.5 / out_data)]

        return Tensor._from_op(out_data, (self,), bwd, "sqrt")

    def relu(self):
        mask = self.data > 0.0

        def bwd(g):
            return [(self, g * mask)]

        return Tensor._from_op(self.data * mask, (self,), bwd, "relu")

    def sigmoid(self):
        out_data = np.where(self.data >= 0,
                            1.0 / (1.0 + np.exp(-np.abs(self.data))),
                            np.exp(-np.abs(self.data))
                            / (1.0 + np.exp(-np.abs(self.data))))

        def bwd(g):
            return [(self, g * out_data * (1.0 - out_data))]

        return Tensor._from_op(out_data, (self,), bwd, "sigmoid")

    def abs(self):
        sign = np.sign(self.data)

        def bwd(g):
            return [(self, g * sign)]

        return Tensor._from_op(np.abs(self.data), (self,), bwd, "abs")

    def clamp(self, lo=None, hi=None):
        """Clip values; gradient passes through only inside [lo, hi]."""
        out_data = np.clip(self.data, lo, hi)
        inside = np.ones_like(self.data, dtype=bool)
        if lo is not None:
            inside &= self.data >= lo
        if hi is not None:
            inside &= self.data <= hi

        def bwd(g):
            return [(self, g * inside)]

        return Tensor._from_op(out_data, (self,), bwd, "clamp")

    # -- reductions -----------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        out_data = self.data.sum(axis=axis, keepdims=keepdims)

        def bwd(g):
            g = np.asarray(g)
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return [(self, np.broadcast_to(g, self.shape).copy())]

        return Tensor._from_op(out_data, (self,), bwd, "sum")

    def mean(self, axis=None, keepdims: bool = False):
        if axis is None:
            count = self.size
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            count = int(np.prod([self.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def max(self, axis, keepdims: bool = False):
        """Max over the given axes; ties share the gradient equally."""
        out_data = self.data.max(axis=axis, keepdims=True)
        mask = (self.data == out_data).astype(np.float64)
        mask /= mask.sum(axis=axis, keepdims=True)

        def bwd(g):
            g = np.asarray(g)
            if not keepdims:
                g = np.expand_dims(g, axis)
            return [(self, mask * g)]

        data = out_data if keepdims else np.squeeze(out_data, axis=axis)
        return Tensor._from_op(data, (self,), bwd, "max")

    # -- shape ops ------------------------------------------------------------

    def reshape(self, shape):
        src_shape = self.shape

        def bwd(g):
            return [(self, g.reshape(src_shape))]

        return Tensor._from_op(self.data.reshape(shape), (self,), bwd, "reshape")

    def __matmul__(self, other):
        other = _as_tensor(other)
        out_data = self.data @ other.data

        def bwd(g):
            return [(self, g @ other.data.T), (other, self.data.T @ g)]

        return Tensor._from_op(out_data, (self, other), bwd, "matmul")


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def concat(tensors, axis: int) -> Tensor:
    """Concatenate along `axis` with gradient split back to the parts."""
    tensors = [_as_tensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        pieces = []
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            pieces.append((t, g[tuple(idx)]))
        return pieces

    return Tensor._from_op(out_data, tensors, bwd, "concat")


def stack_rows(tensors) -> Tensor:
    """Stack same-shape tensors along a new leading axis."""
    tensors = [_as_tensor(t) for t in tensors]
    out_data = np.stack([t.data for t in tensors], axis=0)

    def bwd(g):
        return [(t, g[i]) for i, t in enumerate(tensors)]

    return Tensor._from_op(out_data, tensors, bwd, "stack")
