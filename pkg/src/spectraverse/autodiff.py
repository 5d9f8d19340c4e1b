"""Minimal reverse-mode autodiff over numpy arrays.

A Tensor wraps an ndarray and remembers how it was produced; backward()
replays the tape in reverse topological order. The op set is exactly what
the pipeline needs: broadcast arithmetic, matmul, a few smooth
nonlinearities, reductions, gather/scatter for traversal reordering, and the
linear recurrence as a single primitive whose backward is the hand-derived
scan gradient from :mod:`spectraverse.ssm`.
"""

from __future__ import annotations

import numpy as np

from .errors import InvalidArgumentError
from .ssm import (
    linear_recurrence,
    linear_recurrence_backward,
    selective_channel_scan,
    selective_channel_scan_backward,
)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum grad over the axes numpy broadcast to reach `grad.shape` from `shape`."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={self.requires_grad})"

    # -- graph plumbing ----------------------------------------------------

    @staticmethod
    def _lift(x) -> "Tensor":
        return x if isinstance(x, Tensor) else Tensor(x)

    @staticmethod
    def _node(data, parents, backward) -> "Tensor":
        out = Tensor(data)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    def _accumulate(self, grad: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += grad

    def backward(self) -> None:
        if self.data.size != 1:
            raise InvalidArgumentError("backward() requires a scalar loss")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                stack.append((p, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def item(self) -> float:
        return float(self.data)

    # -- arithmetic ----------------------------------------------------------

    def __add__(self, other):
        other = self._lift(other)

        def backward(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g, self.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(g, other.shape))

        return self._node(self.data + other.data, (self, other), backward)

    __radd__ = __add__

    def __mul__(self, other):
        other = self._lift(other)

        def backward(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g * other.data, self.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(g * self.data, other.shape))

        return self._node(self.data * other.data, (self, other), backward)

    __rmul__ = __mul__

    def __neg__(self):
        return self * (-1.0)

    def __sub__(self, other):
        return self + (-self._lift(other))

    def __rsub__(self, other):
        return self._lift(other) + (-self)

    def __truediv__(self, other):
        return self * self._lift(other) ** -1.0

    def __pow__(self, exponent: float):
        def backward(g):
            if self.requires_grad:
                self._accumulate(g * exponent * self.data ** (exponent - 1.0))

        return self._node(self.data**exponent, (self,), backward)

    def __matmul__(self, other):
        other = self._lift(other)

        def backward(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g @ np.swapaxes(other.data, -1, -2), self.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(np.swapaxes(self.data, -1, -2) @ g, other.shape))

        return self._node(self.data @ other.data, (self, other), backward)

    # -- elementwise nonlinearities -------------------------------------------

    def exp(self):
        out_data = np.exp(self.data)

        def backward(g):
            if self.requires_grad:
                self._accumulate(g * out_data)

        return self._node(out_data, (self,), backward)

    def log(self):
        def backward(g):
            if self.requires_grad:
                self._accumulate(g / self.data)

        return self._node(np.log(self.data), (self,), backward)

    def tanh(self):
        out_data = np.tanh(self.data)

        def backward(g):
            if self.requires_grad:
                self._accumulate(g * (1.0 - out_data**2))

        return self._node(out_data, (self,), backward)

    def sigmoid(self):
        out_data = 1.0 / (1.0 + np.exp(-np.clip(self.data, -50, 50)))

        def backward(g):
            if self.requires_grad:
                self._accumulate(g * out_data * (1.0 - out_data))

        return self._node(out_data, (self,), backward)

    def softplus(self):
        def backward(g):
            if self.requires_grad:
                sig = 1.0 / (1.0 + np.exp(-np.clip(self.data, -50, 50)))
                self._accumulate(g * sig)

        return self._node(np.logaddexp(0.0, self.data), (self,), backward)

    def relu(self):
        def backward(g):
            if self.requires_grad:
                self._accumulate(g * (self.data > 0))

        return self._node(np.maximum(self.data, 0.0), (self,), backward)

    def silu(self):
        return self * self.sigmoid()

    # -- reductions ------------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        def backward(g):
            if not self.requires_grad:
                return
            if axis is None:
                self._accumulate(np.broadcast_to(g, self.shape).copy())
                return
            if not keepdims:
                g = np.expand_dims(g, axis)
            self._accumulate(np.broadcast_to(g, self.shape).copy())

        return self._node(self.data.sum(axis=axis, keepdims=keepdims), (self,), backward)

    def mean(self, axis=None, keepdims: bool = False):
        count = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def _extremum(self, axis: int, pick):
        idx = pick(self.data, axis=axis)
        out_data = np.take_along_axis(self.data, np.expand_dims(idx, axis), axis).squeeze(axis)

        def backward(g):
            if self.requires_grad:
                full = np.zeros_like(self.data)
                np.put_along_axis(
                    full, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis
                )
                self._accumulate(full)

        return self._node(out_data, (self,), backward)

    def max(self, axis: int):
        """Max along one axis; the gradient flows to the first argmax."""
        return self._extremum(axis, np.argmax)

    def min(self, axis: int):
        return self._extremum(axis, np.argmin)

    # -- shape & indexing --------------------------------------------------------

    def reshape(self, *shape):
        def backward(g):
            if self.requires_grad:
                self._accumulate(g.reshape(self.shape))

        return self._node(self.data.reshape(*shape), (self,), backward)

    def gather_rows(self, indices):
        """Select rows (axis 0) by an integer index array; repeats allowed."""
        idx = np.asarray(indices, dtype=np.int64)

        def backward(g):
            if self.requires_grad:
                full = np.zeros_like(self.data)
                np.add.at(full, idx, g)
                self._accumulate(full)

        return self._node(self.data[idx], (self,), backward)

    def narrow(self, axis: int, start: int, length: int):
        """Contiguous slice [start, start+length) along one axis."""
        slicer = [slice(None)] * self.data.ndim
        slicer[axis] = slice(start, start + length)
        slicer = tuple(slicer)

        def backward(g):
            if self.requires_grad:
                full = np.zeros_like(self.data)
                full[slicer] = g
                self._accumulate(full)

        return self._node(self.data[slicer], (self,), backward)

    def segment_mean(self, segment_ids, n_segments: int):
        """Average rows sharing a segment id; rows of empty segments are zero."""
        ids = np.asarray(segment_ids, dtype=np.int64)
        if ids.shape[0] != self.data.shape[0]:
            raise InvalidArgumentError("one segment id per row required")
        counts = np.bincount(ids, minlength=n_segments).astype(np.float64)
        safe = np.maximum(counts, 1.0)
        sums = np.zeros((n_segments,) + self.data.shape[1:])
        np.add.at(sums, ids, self.data)
        out_data = sums / safe.reshape((-1,) + (1,) * (self.data.ndim - 1))

        def backward(g):
            if self.requires_grad:
                scaled = g / safe.reshape((-1,) + (1,) * (self.data.ndim - 1))
                self._accumulate(scaled[ids])

        return self._node(out_data, (self,), backward)

    def recurrence(self, u: "Tensor"):
        """h_k = self_k * h_{k-1} + u_k along axis 0 (one tape node)."""
        a = self
        states = linear_recurrence(a.data, u.data)

        def backward(g):
            d_a, d_u = linear_recurrence_backward(a.data, states, g)
            if a.requires_grad:
                a._accumulate(d_a)
            if u.requires_grad:
                u._accumulate(d_u)

        return self._node(states, (a, u), backward)


def selective_scan_op(dt: Tensor, b_sel: Tensor, c_sel: Tensor, a: Tensor, xs: Tensor) -> Tensor:
    """Fused selective scan as a single tape node (see ssm.selective_channel_scan)."""
    y, cache = selective_channel_scan(dt.data, b_sel.data, c_sel.data, a.data, xs.data)

    def backward(g):
        d_dt, d_b, d_c, d_a, d_xs = selective_channel_scan_backward(
            dt.data, b_sel.data, c_sel.data, a.data, xs.data, cache, g
        )
        for tensor, grad in ((dt, d_dt), (b_sel, d_b), (c_sel, d_c), (a, d_a), (xs, d_xs)):
            if tensor.requires_grad:
                tensor._accumulate(grad)

    return Tensor._node(y, (dt, b_sel, c_sel, a, xs), backward)


def concat_rows(tensors: list[Tensor]) -> Tensor:
    """Concatenate along axis 0."""
    tensors = [Tensor._lift(t) for t in tensors]
    sizes = [t.data.shape[0] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                t._accumulate(g[lo:hi])

    return Tensor._node(
        np.concatenate([t.data for t in tensors], axis=0), tuple(tensors), backward
    )


def parameter(data) -> Tensor:
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=True)


def rms_norm(x: Tensor, scale: Tensor, eps: float = 1e-6) -> Tensor:
    """Root-mean-square normalization over the last axis with a learned scale."""
    ms = (x * x).mean(axis=-1, keepdims=True)
    return x * (ms + eps) ** -0.5 * scale


def cross_entropy(logits: Tensor, target: int) -> Tensor:
    """Stable softmax cross-entropy for a single (C,) logit vector."""
    shift = logits - float(np.max(logits.data))
    lse = shift.exp().sum().log()
    onehot = np.zeros(logits.shape)
    onehot[target] = 1.0
    return lse - (shift * onehot).sum()
