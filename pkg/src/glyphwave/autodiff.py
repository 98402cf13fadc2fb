"""Reverse-mode autodiff over numpy arrays, sized for desk-scale models.

Every op records a closure that adds into its parents' grads; `backward()`
replays them in reverse topological order. Arrays keep whatever float dtype
they were built with, so the same graph runs in f32 for training and f64 for
finite-difference checks.
"""

from __future__ import annotations

import numpy as np


class GraphCycle(Exception):
    """The recorded graph is not a DAG (programming error)."""


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "_parents", "_backward")

    def __init__(self, data, _parents=(), _backward=None):
        if isinstance(data, np.ndarray):
            self.data = data
        elif isinstance(data, np.generic):  # numpy scalar: keep its dtype
            self.data = np.asarray(data)
        else:
            self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def _accumulate(self, grad: np.ndarray, fresh: bool = False) -> None:
        # `fresh` marks a newly allocated array nobody else references; it can
        # be adopted without copying. Once a node's backward has run, its grad
        # buffer is dead, so views of it are fresh too.
        if self.grad is None:
            self.grad = grad if fresh else grad.copy()
        else:
            self.grad += grad

    def _accumulate_unbroadcast(self, grad: np.ndarray, fresh: bool = False) -> None:
        reduced = _unbroadcast(grad, self.shape)
        self._accumulate(reduced, fresh=fresh or reduced is not grad)

    def _lift(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.data.dtype))

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, other):
        other = self._lift(other)
        out = Tensor(self.data + other.data, (self, other))

        def backward():
            self._accumulate_unbroadcast(out.grad)
            other._accumulate_unbroadcast(out.grad)
        out._backward = backward
        return out

    __radd__ = __add__

    def __neg__(self):
        out = Tensor(-self.data, (self,))
        out._backward = lambda: self._accumulate(-out.grad, fresh=True)
        return out

    def __sub__(self, other):
        other = self._lift(other)
        out = Tensor(self.data - other.data, (self, other))

        def backward():
            self._accumulate_unbroadcast(out.grad)
            other._accumulate_unbroadcast(-out.grad, fresh=True)
        out._backward = backward
        return out

    def __rsub__(self, other):
        return self._lift(other) - self

    def __mul__(self, other):
        other = self._lift(other)
        out = Tensor(self.data * other.data, (self, other))

        def backward():
            self._accumulate_unbroadcast(out.grad * other.data, fresh=True)
            other._accumulate_unbroadcast(out.grad * self.data, fresh=True)
        out._backward = backward
        return out

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._lift(other)
        out = Tensor(self.data / other.data, (self, other))

        def backward():
            self._accumulate_unbroadcast(out.grad / other.data, fresh=True)
            other._accumulate_unbroadcast(-out.grad * self.data / (other.data ** 2),
                                          fresh=True)
        out._backward = backward
        return out

    def __rtruediv__(self, other):
        return self._lift(other) / self

    def __pow__(self, exponent):
        if not isinstance(exponent, (int, float)):
            raise TypeError("only scalar exponents are supported")
        out = Tensor(self.data ** exponent, (self,))

        def backward():
            self._accumulate(out.grad * exponent * self.data ** (exponent - 1),
                             fresh=True)
        out._backward = backward
        return out

    def __matmul__(self, other):
        other = self._lift(other)
        if self.ndim != 2 or other.ndim != 2:
            raise ValueError(f"matmul expects 2-D operands, got {self.shape} @ {other.shape}")
        out = Tensor(self.data @ other.data, (self, other))

        def backward():
            self._accumulate(out.grad @ other.data.T, fresh=True)
            other._accumulate(self.data.T @ out.grad, fresh=True)
        out._backward = backward
        return out

    # -- elementwise --------------------------------------------------------

    def exp(self):
        out = Tensor(np.exp(self.data), (self,))
        out._backward = lambda: self._accumulate(out.grad * out.data, fresh=True)
        return out

    def log(self):
        out = Tensor(np.log(self.data), (self,))
        out._backward = lambda: self._accumulate(out.grad / self.data, fresh=True)
        return out

    def sqrt(self):
        out = Tensor(np.sqrt(self.data), (self,))
        out._backward = lambda: self._accumulate(out.grad * 0.5 / out.data, fresh=True)
        return out

    def tanh(self):
        out = Tensor(np.tanh(self.data), (self,))
        out._backward = lambda: self._accumulate(out.grad * (1.0 - out.data ** 2), fresh=True)
        return out

    def relu(self):
        out = Tensor(np.maximum(self.data, 0.0), (self,))
        out._backward = lambda: self._accumulate(out.grad * (self.data > 0), fresh=True)
        return out

    # -- reductions / shape -------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        out = Tensor(self.data.sum(axis=axis, keepdims=keepdims), (self,))

        def backward():
            grad = out.grad
            if axis is not None and not keepdims:
                grad = np.expand_dims(grad, axis)
            self._accumulate(np.broadcast_to(grad, self.shape).copy(), fresh=True)
        out._backward = backward
        return out

    def mean(self, axis=None, keepdims=False):
        if axis is None:
            count = self.data.size
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            count = 1
            for a in axes:
                count *= self.shape[a]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        out = Tensor(self.data.reshape(shape), (self,))
        out._backward = lambda: self._accumulate(out.grad.reshape(self.shape),
                                                 fresh=True)
        return out

    def transpose(self, axes=None):
        out = Tensor(self.data.transpose(axes), (self,))
        if axes is None:
            out._backward = lambda: self._accumulate(out.grad.transpose(), fresh=True)
        else:
            inverse = tuple(np.argsort(axes))
            out._backward = lambda: self._accumulate(out.grad.transpose(inverse),
                                                     fresh=True)
        return out

    @property
    def T(self):
        return self.transpose()

    # -- backprop driver ----------------------------------------------------

    def backward(self) -> None:
        topo: list[Tensor] = []
        state: dict[int, int] = {}  # 0 entered, 1 done
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                state[id(node)] = 1
                topo.append(node)
                continue
            st = state.get(id(node))
            if st == 1:
                continue
            if st == 0:
                raise GraphCycle("cycle detected in autodiff graph")
            state[id(node)] = 0
            stack.append((node, True))
            for parent in node._parents:
                if state.get(id(parent)) != 1:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward()


# ---------------------------------------------------------------------------
# Structured ops


def take_rows(t: Tensor, index: np.ndarray) -> Tensor:
    """Gather along the first axis with an integer index of any shape.

    Backward scatter-adds, so repeated indices (length regulation, unfolds)
    get correctly summed gradients.
    """
    index = np.asarray(index)
    out = Tensor(t.data[index], (t,))

    def backward():
        grad = np.zeros_like(t.data)
        np.add.at(grad, index, out.grad)
        t._accumulate(grad, fresh=True)
    out._backward = backward
    return out


def gather(t: Tensor, flat_index: np.ndarray) -> Tensor:
    """Gather from the flattened tensor; output has the index's shape."""
    flat_index = np.asarray(flat_index)
    out = Tensor(t.data.reshape(-1)[flat_index], (t,))

    def backward():
        grad = np.bincount(flat_index.reshape(-1), weights=out.grad.reshape(-1),
                           minlength=t.data.size)
        t._accumulate(grad.reshape(t.shape).astype(t.data.dtype, copy=False),
                      fresh=True)
    out._backward = backward
    return out


def zero_pad_middle(t: Tensor, pad: int) -> Tensor:
    """Zero-pad axes 1 and 2 of a (N, H, W, C) tensor by `pad` on each side."""
    width = [(0, 0), (pad, pad), (pad, pad), (0, 0)]
    out = Tensor(np.pad(t.data, width), (t,))

    def backward():
        t._accumulate(out.grad[:, pad:-pad, pad:-pad, :], fresh=True)
    out._backward = backward
    return out


def zero_pad_rows(t: Tensor, before: int, after: int) -> Tensor:
    width = [(before, after)] + [(0, 0)] * (t.ndim - 1)
    out = Tensor(np.pad(t.data, width), (t,))

    def backward():
        stop = out.grad.shape[0] - after if after else None
        t._accumulate(out.grad[before:stop], fresh=True)
    out._backward = backward
    return out


def softmax_last(t: Tensor) -> Tensor:
    # Subtracting the (detached) row max shifts nothing: softmax is invariant
    # to constant offsets, so the gradient stays exact.
    shifted = t - Tensor(t.data.max(axis=-1, keepdims=True))
    e = shifted.exp()
    return e / e.sum(axis=-1, keepdims=True)


def layer_norm(t: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    mu = t.mean(axis=-1, keepdims=True)
    centered = t - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    return centered / (var + eps).sqrt() * gain + bias


def linear(t: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    out = t @ weight
    if bias is not None:
        out = out + bias
    return out
