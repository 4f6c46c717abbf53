"""Minimal reverse-mode gradient engine on numpy arrays.

Supports exactly the operations the denoisers and loss functions need:
broadcast arithmetic, matmul, row gathers, (log-)softmax, GELU and
reductions. Graphs are built eagerly and freed after ``backward``.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np

_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Disable graph construction inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce ``grad`` back to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A float64 array with an optional gradient tape."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward = None

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def as_tensor(x) -> "Tensor":
        return x if isinstance(x, Tensor) else Tensor(x)

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={self.requires_grad})"

    # -- graph plumbing --------------------------------------------------------

    @staticmethod
    def _make(data, parents, backward) -> "Tensor":
        out = Tensor(data)
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    def backward(self, grad: np.ndarray | None = None):
        """Accumulate gradients of self w.r.t. every reachable leaf."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without grad requires a scalar")
            grad = np.ones_like(self.data)
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                stack.append((p, False))
        self.grad = np.asarray(grad, dtype=np.float64)
        for node in reversed(topo):
            if node._backward is None:
                continue
            node._backward(node.grad)
            node._parents = ()
            node._backward = None

    def _accum(self, grad: np.ndarray):
        if not self.requires_grad:
            return
        grad = _unbroadcast(np.asarray(grad, dtype=np.float64), self.data.shape)
        if self.grad is None:
            self.grad = grad.copy()
        else:
            self.grad = self.grad + grad

    # -- arithmetic ------------------------------------------------------------

    def __add__(self, other):
        a, b = self, Tensor.as_tensor(other)

        def bwd(g):
            a._accum(g)
            b._accum(g)

        return Tensor._make(a.data + b.data, (a, b), bwd)

    __radd__ = __add__

    def __mul__(self, other):
        a, b = self, Tensor.as_tensor(other)

        def bwd(g):
            a._accum(g * b.data)
            b._accum(g * a.data)

        return Tensor._make(a.data * b.data, (a, b), bwd)

    __rmul__ = __mul__

    def __sub__(self, other):
        a, b = self, Tensor.as_tensor(other)

        def bwd(g):
            a._accum(g)
            b._accum(-g)

        return Tensor._make(a.data - b.data, (a, b), bwd)

    def __rsub__(self, other):
        return Tensor.as_tensor(other) - self

    def __truediv__(self, other):
        a, b = self, Tensor.as_tensor(other)

        def bwd(g):
            a._accum(g / b.data)
            b._accum(-g * a.data / (b.data * b.data))

        return Tensor._make(a.data / b.data, (a, b), bwd)

    def __rtruediv__(self, other):
        return Tensor.as_tensor(other) / self

    def __neg__(self):
        a = self

        def bwd(g):
            a._accum(-g)

        return Tensor._make(-a.data, (a,), bwd)

    def __pow__(self, exponent: float):
        a = self
        e = float(exponent)

        def bwd(g):
            a._accum(g * e * a.data ** (e - 1.0))

        return Tensor._make(a.data**e, (a,), bwd)

    def __matmul__(self, other):
        a, b = self, Tensor.as_tensor(other)

        def bwd(g):
            a._accum(g @ b.data.T)
            b._accum(a.data.T @ g)

        return Tensor._make(a.data @ b.data, (a, b), bwd)

    # -- elementwise -----------------------------------------------------------

    def exp(self):
        a = self
        out_data = np.exp(a.data)

        def bwd(g):
            a._accum(g * out_data)

        return Tensor._make(out_data, (a,), bwd)

    def log(self):
        a = self

        def bwd(g):
            a._accum(g / a.data)

        return Tensor._make(np.log(a.data), (a,), bwd)

    def gelu(self):
        """tanh-form GELU, the smooth rectifier used by the MLP denoiser."""
        a = self
        c = math.sqrt(2.0 / math.pi)
        inner = c * (a.data + 0.044715 * a.data**3)
        th = np.tanh(inner)
        out_data = 0.5 * a.data * (1.0 + th)

        def bwd(g):
            sech2 = 1.0 - th * th
            d_inner = c * (1.0 + 3 * 0.044715 * a.data**2)
            a._accum(g * (0.5 * (1.0 + th) + 0.5 * a.data * sech2 * d_inner))

        return Tensor._make(out_data, (a,), bwd)

    def clamp_min(self, lo: float):
        """max(self, lo); gradient passes only where self > lo."""
        a = self
        keep = a.data > lo

        def bwd(g):
            a._accum(g * keep)

        return Tensor._make(np.maximum(a.data, lo), (a,), bwd)

    # -- reductions and shaping -------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        a = self

        def bwd(g):
            if axis is None:
                a._accum(np.broadcast_to(g, a.data.shape))
            else:
                g2 = g if keepdims else np.expand_dims(g, axis)
                a._accum(np.broadcast_to(g2, a.data.shape))

        return Tensor._make(a.data.sum(axis=axis, keepdims=keepdims), (a,), bwd)

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape):
        a = self

        def bwd(g):
            a._accum(g.reshape(a.data.shape))

        return Tensor._make(a.data.reshape(*shape), (a,), bwd)

    def take_rows(self, idx):
        """Row gather from a 2-D tensor; backward scatter-adds."""
        a = self
        idx = np.asarray(idx, dtype=np.int64)

        def bwd(g):
            if not a.requires_grad:
                return
            acc = np.zeros_like(a.data)
            np.add.at(acc, idx, g)
            a._accum(acc)

        return Tensor._make(a.data[idx], (a,), bwd)

    def gather(self, rows, cols):
        """Element gather out[k] = self[rows[k], cols[k]]."""
        a = self
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)

        def bwd(g):
            if not a.requires_grad:
                return
            acc = np.zeros_like(a.data)
            np.add.at(acc, (rows, cols), g)
            a._accum(acc)

        return Tensor._make(a.data[rows, cols], (a,), bwd)

    def log_softmax(self):
        """Row-wise log-softmax over the last axis."""
        a = self
        m = a.data.max(axis=-1, keepdims=True)
        shifted = a.data - m
        lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
        out_data = shifted - lse
        probs = np.exp(out_data)

        def bwd(g):
            a._accum(g - probs * g.sum(axis=-1, keepdims=True))

        return Tensor._make(out_data, (a,), bwd)

    def softmax(self):
        a = self
        m = a.data.max(axis=-1, keepdims=True)
        e = np.exp(a.data - m)
        out_data = e / e.sum(axis=-1, keepdims=True)

        def bwd(g):
            dot = (g * out_data).sum(axis=-1, keepdims=True)
            a._accum(out_data * (g - dot))

        return Tensor._make(out_data, (a,), bwd)


def concat(tensors: list[Tensor], axis: int = 0) -> Tensor:
    """Concatenate tensors along ``axis``."""
    tensors = [Tensor.as_tensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            t._accum(g[tuple(sl)])

    return Tensor._make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bwd)


def stack_rows(rows: list[Tensor]) -> Tensor:
    """Stack 1-D tensors into a 2-D tensor (one per row)."""
    rows = [Tensor.as_tensor(r) for r in rows]

    def bwd(g):
        for i, r in enumerate(rows):
            r._accum(g[i])

    return Tensor._make(np.stack([r.data for r in rows]), tuple(rows), bwd)


def param(data) -> Tensor:
    """A trainable leaf tensor."""
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def zero_grads(params: dict[str, Tensor]):
    for p in params.values():
        p.grad = None


def collect_grads(params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    """Snapshot gradients (zeros where a parameter was unused)."""
    return {
        k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
        for k, p in params.items()
    }
