"""Reverse-mode automatic differentiation over dense float64 tensors.

Every forward pass builds an implicit tape: each Tensor records the
tensors it was computed from and a closure that pushes gradients back to
them. Creation order is strictly increasing, so walking the reachable
nodes in decreasing creation order is a valid reverse topological
traversal. One tape per forward pass; it is garbage collected once the
sweep is done.

All storage is numpy float64, row-major, rank <= 4. Every primitive
checks its output for NaN/Inf and raises NumericError instead of letting
poison propagate (toggle with CHECK_FINITE for profiling).
"""

import numpy as np

from .errors import ContractError, DimensionError, NumericError

CHECK_FINITE = True

MAX_RANK = 4

# Additive mask value for disallowed attention slots: large enough that
# exp(x - max) underflows to exactly 0.0, small enough to stay finite.
NEG_MASK = -1e30

_counter = 0


def _next_id():
    global _counter
    _counter += 1
    return _counter


def _check(values, op):
    if CHECK_FINITE and not np.all(np.isfinite(values)):
        raise NumericError(f"non-finite values produced by '{op}'")
    return values


class Tensor:
    """A node in the autodiff graph wrapping a float64 ndarray."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_tid", "op")

    def __init__(self, data, requires_grad=False, _parents=(), _op="leaf"):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim > MAX_RANK:
            raise DimensionError(f"rank {arr.ndim} exceeds maximum rank {MAX_RANK}")
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self._parents = _parents
        self._backward = None
        self._tid = _next_id()
        self.op = _op

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self.op})"

    def item(self):
        if self.data.size != 1:
            raise ContractError(f"item() on non-scalar tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def detach(self):
        return Tensor(self.data.copy())

    def accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    # -- operator sugar (constants are wrapped as non-grad leaves) --------

    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __neg__(self):
        return mul(self, _wrap(-1.0))

    def __matmul__(self, other):
        return matmul(self, _wrap(other))


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# -- elementwise arithmetic ------------------------------------------------


def add(a, b):
    out = Tensor(_check(a.data + b.data, "add"), _parents=(a, b), _op="add")

    def backward(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(g, b.data.shape))

    out._backward = backward
    return out


def sub(a, b):
    out = Tensor(_check(a.data - b.data, "sub"), _parents=(a, b), _op="sub")

    def backward(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(-g, b.data.shape))

    out._backward = backward
    return out


def mul(a, b):
    out = Tensor(_check(a.data * b.data, "mul"), _parents=(a, b), _op="mul")

    def backward(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(g * a.data, b.data.shape))

    out._backward = backward
    return out


def matmul(a, b):
    """Matrix product; rank-2 x rank-2, or batched rank-3 with equal leading dim."""
    if a.data.ndim == 2 and b.data.ndim == 2:
        if a.data.shape[1] != b.data.shape[0]:
            raise DimensionError(
                f"matmul inner dimensions disagree: {a.data.shape} x {b.data.shape}")
    elif a.data.ndim == 3 and b.data.ndim == 3:
        if a.data.shape[0] != b.data.shape[0] or a.data.shape[2] != b.data.shape[1]:
            raise DimensionError(
                f"batched matmul shapes disagree: {a.data.shape} x {b.data.shape}")
    else:
        raise DimensionError(
            f"matmul expects rank-2 or batched rank-3 operands, got {a.data.shape} x {b.data.shape}")
    out = Tensor(_check(a.data @ b.data, "matmul"), _parents=(a, b), _op="matmul")

    def backward(g):
        if a.requires_grad:
            a.accumulate(g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            b.accumulate(np.swapaxes(a.data, -1, -2) @ g)

    out._backward = backward
    return out


def tsum(x, axis=None, keepdims=False):
    out = Tensor(np.sum(x.data, axis=axis, keepdims=keepdims), _parents=(x,), _op="sum")

    def backward(g):
        if not x.requires_grad:
            return
        if axis is None:
            x.accumulate(np.broadcast_to(g, x.data.shape).copy())
        else:
            ge = g if keepdims else np.expand_dims(g, axis)
            x.accumulate(np.broadcast_to(ge, x.data.shape).copy())

    out._backward = backward
    return out


def tmean(x, axis=None, keepdims=False):
    n = x.data.size if axis is None else x.data.shape[axis]
    return tsum(x, axis=axis, keepdims=keepdims) * (1.0 / n)


def sqrt(x):
    if np.any(x.data < 0):
        raise NumericError("sqrt of negative value")
    root = np.sqrt(x.data)
    out = Tensor(root, _parents=(x,), _op="sqrt")

    def backward(g):
        if x.requires_grad:
            # Subgradient 0 at exactly zero (the RMSE-at-optimum convention).
            safe = np.where(root > 0.0, root, 1.0)
            x.accumulate(np.where(root > 0.0, 0.5 / safe, 0.0) * g)

    out._backward = backward
    return out


# -- activations -----------------------------------------------------------


def relu(x):
    out = Tensor(np.maximum(x.data, 0.0), _parents=(x,), _op="relu")

    def backward(g):
        if x.requires_grad:
            x.accumulate(g * (x.data > 0.0))

    out._backward = backward
    return out


def leaky_relu(x, slope=0.2):
    if not 0.0 < slope < 1.0:
        raise ContractError(f"leaky_relu slope must lie in (0, 1), got {slope}")
    out = Tensor(np.where(x.data > 0.0, x.data, slope * x.data), _parents=(x,), _op="leaky_relu")

    def backward(g):
        if x.requires_grad:
            x.accumulate(g * np.where(x.data > 0.0, 1.0, slope))

    out._backward = backward
    return out


def sigmoid(x):
    d = x.data
    val = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.clip(d, 0, None))),
                   np.exp(np.clip(d, None, 0)) / (1.0 + np.exp(np.clip(d, None, 0))))
    out = Tensor(_check(val, "sigmoid"), _parents=(x,), _op="sigmoid")

    def backward(g):
        if x.requires_grad:
            x.accumulate(g * val * (1.0 - val))

    out._backward = backward
    return out


def softmax(x, axis):
    if not -x.data.ndim <= axis < x.data.ndim:
        raise DimensionError(f"softmax axis {axis} out of range for shape {x.data.shape}")
    # The per-slice max is detached: softmax(x - c) == softmax(x), so the
    # gradient is unchanged while exp can no longer overflow.
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    val = e / np.sum(e, axis=axis, keepdims=True)
    out = Tensor(_check(val, "softmax"), _parents=(x,), _op="softmax")

    def backward(g):
        if x.requires_grad:
            inner = np.sum(g * val, axis=axis, keepdims=True)
            x.accumulate((g - inner) * val)

    out._backward = backward
    return out


# -- shape manipulation ----------------------------------------------------


def reshape(x, shape):
    if -1 not in tuple(shape) and int(np.prod(shape)) != x.data.size:
        raise DimensionError(f"cannot reshape {x.data.shape} into {shape}")
    out = Tensor(x.data.reshape(shape), _parents=(x,), _op="reshape")

    def backward(g):
        if x.requires_grad:
            x.accumulate(g.reshape(x.data.shape))

    out._backward = backward
    return out


def transpose(x, axes):
    out = Tensor(np.transpose(x.data, axes), _parents=(x,), _op="transpose")
    inverse = np.argsort(axes)

    def backward(g):
        if x.requires_grad:
            x.accumulate(np.transpose(g, inverse))

    out._backward = backward
    return out


def concat(tensors, axis):
    """Concatenate along `axis`; the backward pass splits the gradient."""
    if not tensors:
        raise ContractError("concat of an empty tensor list")
    first = tensors[0].data.shape
    for t in tensors[1:]:
        s = t.data.shape
        if len(s) != len(first) or any(
                i != axis % len(first) and s[i] != first[i] for i in range(len(first))):
            raise DimensionError(f"concat shapes disagree off-axis: {first} vs {s}")
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis),
                 _parents=tuple(tensors), _op="concat")
    sizes = [t.data.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t.accumulate(g[tuple(idx)])

    out._backward = backward
    return out


def split(x, sizes, axis):
    """Inverse of concat: cut `x` into chunks of the given sizes along `axis`."""
    if sum(sizes) != x.data.shape[axis]:
        raise DimensionError(f"split sizes {sizes} do not cover axis {axis} of {x.data.shape}")
    bounds = np.cumsum([0] + list(sizes))
    return [take(x, np.arange(lo, hi), axis) for lo, hi in zip(bounds[:-1], bounds[1:])]


def take(x, indices, axis):
    """Select constant integer `indices` along `axis`; backward scatters."""
    idx = np.asarray(indices, dtype=np.intp)
    out = Tensor(np.take(x.data, idx, axis=axis), _parents=(x,), _op="take")

    def backward(g):
        if x.requires_grad:
            full = np.zeros_like(x.data)
            moved = np.moveaxis(full, axis, 0)
            np.add.at(moved, idx, np.moveaxis(g, axis, 0))
            x.accumulate(full)

    out._backward = backward
    return out


# -- composites ------------------------------------------------------------


def fully_connected(x, weights, bias, slope=0.2):
    """leaky_relu(x @ W + b); x may be rank >= 2 (last axis is features)."""
    if x.data.shape[-1] != weights.data.shape[0]:
        raise DimensionError(
            f"fully_connected: input features {x.data.shape} vs weights {weights.data.shape}")
    lead = x.data.shape[:-1]
    flat = reshape(x, (-1, x.data.shape[-1])) if x.data.ndim != 2 else x
    y = add(matmul(flat, weights), bias)
    y = leaky_relu(y, slope)
    if x.data.ndim != 2:
        y = reshape(y, lead + (weights.data.shape[1],))
    return y


def linear(x, weights, bias=None):
    """x @ W (+ b) without an activation, over the last axis."""
    lead = x.data.shape[:-1]
    flat = reshape(x, (-1, x.data.shape[-1])) if x.data.ndim != 2 else x
    y = matmul(flat, weights)
    if bias is not None:
        y = add(y, bias)
    if x.data.ndim != 2:
        y = reshape(y, lead + (weights.data.shape[1],))
    return y


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalize the last axis to zero mean / unit variance, then scale+shift.

    Constant slices come out as all-zeros (then bias): the eps in the
    denominator absorbs the zero variance instead of erroring.
    """
    if eps <= 0:
        raise ContractError("layer_norm eps must be positive")
    if gain.data.shape != (x.data.shape[-1],) or bias.data.shape != (x.data.shape[-1],):
        raise DimensionError(
            f"layer_norm gain/bias must match last axis {x.data.shape[-1]}: "
            f"got {gain.data.shape}, {bias.data.shape}")
    m = tmean(x, axis=-1, keepdims=True)
    centered = sub(x, m)
    var = tmean(mul(centered, centered), axis=-1, keepdims=True)
    inv = sqrt(var + eps)
    normed = mul(centered, reciprocal(inv))
    return add(mul(normed, gain), bias)


def reciprocal(x):
    if np.any(x.data == 0.0):
        raise NumericError("reciprocal of zero")
    val = 1.0 / x.data
    out = Tensor(_check(val, "reciprocal"), _parents=(x,), _op="reciprocal")

    def backward(g):
        if x.requires_grad:
            x.accumulate(-g * val * val)

    out._backward = backward
    return out


# -- the reverse sweep -----------------------------------------------------


def backward(loss):
    """Accumulate d(loss)/d(node) into .grad for every reachable node.

    `loss` must be scalar. Gradients add onto whatever is already in
    .grad, so zero parameter gradients before each pass.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward expects a scalar loss, got shape {loss.data.shape}")
    # Iterative reachability walk; creation order gives the reverse
    # topological order, so no recursive sort is needed.
    seen = {id(loss): loss}
    stack = [loss]
    while stack:
        node = stack.pop()
        for p in node._parents:
            if id(p) not in seen:
                seen[id(p)] = p
                stack.append(p)
    loss.accumulate(np.ones_like(loss.data))
    for node in sorted(seen.values(), key=lambda t: t._tid, reverse=True):
        if node._backward is not None and node.grad is not None and node.requires_grad:
            node._backward(node.grad)
