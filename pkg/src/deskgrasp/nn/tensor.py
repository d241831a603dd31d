"""Minimal reverse-mode autodiff on numpy arrays.

Tensors record a closure per producing op; backward() runs the tape in
reverse topological order and accumulates gradients. float32 is the
training dtype, float64 the oracle dtype for finite-difference checks.

Reductions along token axes in attention use `sorted_sum`, which adds the
summands in value order: the forward value is then exactly invariant under
permutations of the reduced axis, which keeps attention blocks bit-exactly
permutation equivariant.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype) if dtype else np.asarray(data)
        if self.data.dtype not in (np.float32, np.float64):
            self.data = self.data.astype(np.float32)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: np.ndarray | None = None) -> None:
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        if grad is None:
            grad = np.ones_like(self.data)
        self.grad = np.asarray(grad, dtype=self.data.dtype)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # convenience arithmetic (delegates to the op functions)
    def __add__(self, other):
        return add(self, _wrap(other, self.dtype))

    def __sub__(self, other):
        return sub(self, _wrap(other, self.dtype))

    def __mul__(self, other):
        return mul(self, _wrap(other, self.dtype))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, _wrap(other, self.dtype))


def _wrap(x, dtype) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype))


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad and t._backward is None and not t._parents:
        return
    g = g.astype(t.data.dtype, copy=False)
    t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad or p._parents for p in parents):
        out._parents = parents
        out._backward = backward
        out.requires_grad = True
    return out


# ---------------------------------------------------------------------------
# primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    data = np.matmul(a.data, b.data)

    def backward(g):
        _accumulate(a, _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape))
        _accumulate(b, _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape))

    return _make(data, (a, b), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError(f"add shapes incompatible: {a.shape} + {b.shape}") from None

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _make(data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data - b.data
    except ValueError:
        raise ShapeError(f"sub shapes incompatible: {a.shape} - {b.shape}") from None

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))

    return _make(data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul shapes incompatible: {a.shape} * {b.shape}") from None

    def backward(g):
        _accumulate(a, _unbroadcast(g * b.data, a.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _make(data, (a, b), backward)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)

    def backward(g):
        _accumulate(a, g * s)

    return _make(a.data * s, (a,), backward)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def backward(g):
        _accumulate(a, g * mask)

    return _make(np.where(mask, a.data, 0.0), (a,), backward)


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)

    def backward(g):
        _accumulate(a, g * (1.0 - t * t))

    return _make(t, (a,), backward)


def exp(a: Tensor) -> Tensor:
    e = np.exp(a.data)

    def backward(g):
        _accumulate(a, g * e)

    return _make(e, (a,), backward)


def log(a: Tensor) -> Tensor:
    def backward(g):
        _accumulate(a, g / a.data)

    return _make(np.log(a.data), (a,), backward)


def sqrt(a: Tensor) -> Tensor:
    r = np.sqrt(a.data)

    def backward(g):
        _accumulate(a, g / (2.0 * np.maximum(r, 1e-12)))

    return _make(r, (a,), backward)


def square(a: Tensor) -> Tensor:
    def backward(g):
        _accumulate(a, g * 2.0 * a.data)

    return _make(a.data * a.data, (a,), backward)


def minimum(a: Tensor, b: Tensor) -> Tensor:
    take_a = a.data <= b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g * take_a, a.shape))
        _accumulate(b, _unbroadcast(g * ~take_a, b.shape))

    return _make(np.minimum(a.data, b.data), (a, b), backward)


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    inside = (a.data > lo) & (a.data < hi)

    def backward(g):
        _accumulate(a, g * inside)

    return _make(np.clip(a.data, lo, hi), (a,), backward)


def softmax(a: Tensor, axis: int = -1, stable_sum: bool = False) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    if stable_sum:
        denom = np.sort(e, axis=axis).sum(axis=axis, keepdims=True)
    else:
        denom = e.sum(axis=axis, keepdims=True)
    y = e / denom

    def backward(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        _accumulate(a, y * (g - dot))

    return _make(y, (a,), backward)


def layernorm(a: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean, unit variance (no gain/bias)."""
    mu = a.data.mean(axis=-1, keepdims=True)
    centered = a.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv

    def backward(g):
        gmean = g.mean(axis=-1, keepdims=True)
        proj = (g * xhat).mean(axis=-1, keepdims=True)
        _accumulate(a, inv * (g - gmean - xhat * proj))

    return _make(xhat, (a,), backward)


def concat(tensors: list[Tensor], axis: int = -1) -> Tensor:
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _accumulate(t, g[tuple(idx)])

    return _make(data, tuple(tensors), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size if axis is None else np.prod(
        [a.shape[ax] for ax in np.atleast_1d(axis)]
    )

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.shape) / count)

    return _make(data, (a,), backward)


def total(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.shape).copy())

    return _make(data, (a,), backward)


def axis_max(a: Tensor, axis: int) -> Tensor:
    """Max along one axis; gradient routes to the first max position."""
    data = a.data.max(axis=axis)
    arg = a.data.argmax(axis=axis)

    def backward(g):
        full = np.zeros_like(a.data)
        np.put_along_axis(
            full, np.expand_dims(arg, axis), np.expand_dims(g, axis), axis=axis
        )
        _accumulate(a, full)

    return _make(data, (a,), backward)


def sorted_sum(a: Tensor, axis: int) -> Tensor:
    """Sum whose forward value is invariant to permutations along axis."""
    data = np.sort(a.data, axis=axis).sum(axis=axis)

    def backward(g):
        _accumulate(a, np.broadcast_to(np.expand_dims(g, axis), a.shape).copy())

    return _make(data, (a,), backward)


def slice_(a: Tensor, idx) -> Tensor:
    data = a.data[idx]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        _accumulate(a, full)

    return _make(data, (a,), backward)


def reshape(a: Tensor, shape) -> Tensor:
    def backward(g):
        _accumulate(a, g.reshape(a.shape))

    return _make(a.data.reshape(shape), (a,), backward)


def transpose_last2(a: Tensor) -> Tensor:
    def backward(g):
        _accumulate(a, np.swapaxes(g, -1, -2))

    return _make(np.swapaxes(a.data, -1, -2), (a,), backward)


def dots_last(a: Tensor, b: Tensor) -> Tensor:
    """out[..., i, j] = sum_k a[..., i, k] * b[..., j, k].

    Forward uses an unoptimized einsum (plain C loops), so every output
    element accumulates over k in the same order: permutations of the i or
    j axes permute the result bit-exactly. BLAS GEMM does not guarantee
    that at micro-tile edges.
    """
    if a.shape[-1] != b.shape[-1]:
        raise ShapeError(f"dots_last inner dims differ: {a.shape} . {b.shape}")
    data = np.einsum("...ik,...jk->...ij", a.data, b.data, optimize=False)

    def backward(g):
        _accumulate(a, _unbroadcast(np.matmul(g, b.data), a.shape))
        _accumulate(b, _unbroadcast(np.matmul(np.swapaxes(g, -1, -2), a.data), b.shape))

    return _make(data, (a, b), backward)
