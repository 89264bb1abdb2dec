"""Dense tensors with reverse-mode differentiation on top of numpy.

Every operation that participates in training is defined here, either as a
composition of primitives or as a fused op with a hand-written backward pass
(convolution, GLU, softmax, embedding lookup).  Gradient correctness for all
of them is pinned by finite-difference checks in the test suite.
"""

from __future__ import annotations

import contextlib

import numpy as np

# Large negative logit used for masking; exp() underflows to exactly 0.0.
MASK_VALUE = -1e30

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (inference passes)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """N-dimensional real array with an optional gradient slot.

    ``data`` is always a numpy array; ``grad``, when present, has the same
    shape.  Tensors built from differentiable ops carry the closures needed
    to push gradients back to their parents.
    """

    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents")

    def __init__(self, data, requires_grad=False):
        if isinstance(data, np.ndarray):
            self.data = data
        else:
            self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._backward = None
        self._parents = ()

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self):
        """Reverse-mode sweep from a scalar output."""
        if self.data.size != 1:
            raise ValueError("backward() is only defined for scalar outputs")
        # Iterative topological sort; decoder graphs get deep enough that
        # recursion would hit the interpreter limit.
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, emitted = stack.pop()
            if emitted:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)

    # -- operator sugar -------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, neg(other) if isinstance(other, Tensor) else -other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return narrow(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self):
        return mean(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self):
        return transpose(self)

    # Pickling drops the graph; only leaves survive (model parameters).
    def __getstate__(self):
        return (self.data, self.requires_grad)

    def __setstate__(self, state):
        self.data, self.requires_grad = state
        self.grad = None
        self._backward = None
        self._parents = ()


def _wrap(out_data, parents, backward):
    out = Tensor(out_data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(g, shape):
    """Reduce gradient ``g`` back to ``shape`` after numpy broadcasting."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _as_const(x, like):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


# -- elementwise ---------------------------------------------------------


def add(a, b):
    b = _as_const(b, a)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.data.shape))

    return _wrap(a.data + b.data, (a, b), backward)


def mul(a, b):
    b = _as_const(b, a)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    return _wrap(a.data * b.data, (a, b), backward)


def div(a, b):
    b = _as_const(b, a)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _wrap(a.data / b.data, (a, b), backward)


def neg(a):
    def backward(g):
        if a.requires_grad:
            a._accumulate(-g)

    return _wrap(-a.data, (a,), backward)


def absolute(a):
    def backward(g):
        if a.requires_grad:
            a._accumulate(g * np.sign(a.data))

    return _wrap(np.abs(a.data), (a,), backward)


def exp(a):
    out_data = np.exp(a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * out_data)

    return _wrap(out_data, (a,), backward)


def log(a):
    def backward(g):
        if a.requires_grad:
            a._accumulate(g / a.data)

    return _wrap(np.log(a.data), (a,), backward)


def sqrt(a):
    out_data = np.sqrt(a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * (0.5 / out_data))

    return _wrap(out_data, (a,), backward)


def sigmoid(a):
    out_data = _sigmoid_np(a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * out_data * (1.0 - out_data))

    return _wrap(out_data, (a,), backward)


def relu(a):
    def backward(g):
        if a.requires_grad:
            a._accumulate(g * (a.data > 0))

    return _wrap(np.maximum(a.data, 0.0), (a,), backward)


def softsign(a):
    denom = 1.0 + np.abs(a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g / (denom * denom))

    return _wrap(a.data / denom, (a,), backward)


def softplus(a):
    # log(1 + e^x), computed without overflow for large |x|
    out_data = np.maximum(a.data, 0.0) + np.log1p(np.exp(-np.abs(a.data)))

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * _sigmoid_np(a.data))

    return _wrap(out_data, (a,), backward)


def _sigmoid_np(x, out=None):
    # tanh form: stable for any sign, branch-free, and usable with a
    # preallocated output buffer (the fused inference path relies on both).
    out = np.multiply(x, 0.5, out=out)
    np.tanh(out, out=out)
    out += 1.0
    out *= 0.5
    return out


# -- shape / indexing -----------------------------------------------------


def narrow(a, idx):
    """Basic slicing; gradient scatters back into the sliced region."""

    def backward(g):
        if a.requires_grad:
            if a.grad is None:
                a.grad = np.zeros_like(a.data)
            a.grad[idx] += g

    return _wrap(a.data[idx].copy(), (a,), backward)


def reshape(a, shape):
    def backward(g):
        if a.requires_grad:
            a._accumulate(g.reshape(a.data.shape))

    return _wrap(a.data.reshape(shape), (a,), backward)


def transpose(a):
    if a.data.ndim != 2:
        raise ValueError("transpose expects a 2-D tensor")

    def backward(g):
        if a.requires_grad:
            a._accumulate(g.T)

    return _wrap(np.ascontiguousarray(a.data.T), (a,), backward)


def concat(tensors, axis=0):
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        pieces = np.split(g, offsets[1:-1], axis=axis)
        for t, piece in zip(tensors, pieces):
            if t.requires_grad:
                t._accumulate(piece)

    return _wrap(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward)


# -- reductions -----------------------------------------------------------


def tsum(a, axis=None, keepdims=False):
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if not a.requires_grad:
            return
        if axis is None:
            a._accumulate(np.broadcast_to(g, a.data.shape))
        else:
            if not keepdims:
                g = np.expand_dims(g, axis)
            a._accumulate(np.broadcast_to(g, a.data.shape))

    return _wrap(np.asarray(out_data), (a,), backward)


def mean(a):
    n = a.data.size

    def backward(g):
        if a.requires_grad:
            a._accumulate(np.broadcast_to(g / n, a.data.shape))

    return _wrap(np.asarray(a.data.mean()), (a,), backward)


# -- linear algebra ---------------------------------------------------------


def matmul(a, b):
    """2-D matrix product with a fixed per-element accumulation order.

    The forward pass deliberately avoids BLAS (einsum without optimization):
    each output element is reduced in the same order regardless of how many
    rows the operand has, so incremental decoding reproduces vectorized
    results bit for bit.  Backward uses BLAS; gradient bits are not part of
    any equivalence contract.
    """

    def backward(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return _wrap(np.einsum("ij,jk->ik", a.data, b.data), (a, b), backward)


def row_matmul(x, w):
    """Vector-matrix product matching matmul's accumulation order exactly."""
    return np.einsum("j,jk->k", x, w)


def conv1d(x, w, causal=False):
    """1-D convolution over time: x is (T, C_in), w is (k, C_in, C_out).

    Output length equals input length.  Causal mode pads k-1 zeros on the
    left; non-causal mode pads (k-1)/2 on each side.  k must be odd.
    """
    k = w.data.shape[0]
    if k % 2 == 0:
        raise ValueError(f"convolution width must be odd, got {k}")
    left = k - 1 if causal else (k - 1) // 2
    right = 0 if causal else (k - 1) // 2
    T = x.data.shape[0]
    xp = np.pad(x.data, ((left, right), (0, 0)))
    # Same einsum path as matmul: keeps rows reproducible when recomputed
    # over any prefix of the sequence.
    out_data = np.einsum("ij,jk->ik", xp[0:T], w.data[0])
    for j in range(1, k):
        out_data += np.einsum("ij,jk->ik", xp[j : j + T], w.data[j])

    def backward(g):
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for j in range(k):
                gxp[j : j + T] += g @ w.data[j].T
            x._accumulate(gxp[left : left + T])
        if w.requires_grad:
            gw = np.empty_like(w.data)
            for j in range(k):
                gw[j] = xp[j : j + T].T @ g
            w._accumulate(gw)

    return _wrap(out_data, (x, w), backward)


# -- fused network ops ------------------------------------------------------


def glu(x, value_bias=None):
    """Gated linear unit over the last axis: first half gated by the second.

    ``value_bias``, when given, is added to the value half before gating
    (per-channel speaker bias).
    """
    c2 = x.data.shape[-1]
    if c2 % 2 != 0:
        raise ValueError(f"GLU needs an even channel count, got {c2}")
    c = c2 // 2
    value = x.data[..., :c]
    gate = _sigmoid_np(x.data[..., c:])
    if value_bias is not None:
        value = value + value_bias.data
    out_data = value * gate
    parents = (x,) if value_bias is None else (x, value_bias)

    def backward(g):
        if x.requires_grad:
            gx = np.empty_like(x.data)
            gx[..., :c] = g * gate
            gx[..., c:] = g * value * gate * (1.0 - gate)
            x._accumulate(gx)
        if value_bias is not None and value_bias.requires_grad:
            value_bias._accumulate(_unbroadcast(g * gate, value_bias.data.shape))

    return _wrap(out_data, parents, backward)


def softmax(x, additive_mask=None):
    """Row softmax over the last axis with an optional additive logit mask.

    The mask is a plain array of zeros and large negative values; masked
    entries come out exactly 0 in the result.
    """
    z = x.data if additive_mask is None else x.data + additive_mask
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out_data = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        if x.requires_grad:
            inner = (g * out_data).sum(axis=-1, keepdims=True)
            x._accumulate(out_data * (g - inner))

    return _wrap(out_data, (x,), backward)


def embedding(table, ids):
    """Row gather from an embedding table; ids is an int array."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise IndexError(
            f"id out of embedding range [0, {table.data.shape[0]}): "
            f"{ids.min()}..{ids.max()}"
        )

    def backward(g):
        if table.requires_grad:
            if table.grad is None:
                table.grad = np.zeros_like(table.data)
            np.add.at(table.grad, ids, g)

    return _wrap(table.data[ids], (table,), backward)


def sinusoid_encoding_t(rate, length, channels, weight=1.0):
    """Positional encoding with a trainable scalar rate tensor.

    Same formula as blocks.positional_encoding but differentiable in the
    rate (used by the per-speaker position-rate heads).
    """
    pos = np.arange(length, dtype=rate.data.dtype)[:, None]
    chan = np.arange(channels)[None, :]
    denom = np.power(10000.0, chan / channels).astype(rate.data.dtype)
    scaled = pos / denom
    phase = float(rate.data) * scaled
    even = chan % 2 == 0
    out_data = weight * np.where(even, np.sin(phase), np.cos(phase))
    dphase = weight * np.where(even, np.cos(phase), -np.sin(phase)) * scaled

    def backward(g):
        if rate.requires_grad:
            rate._accumulate(np.asarray((g * dphase).sum(), dtype=rate.data.dtype).reshape(rate.data.shape))

    return _wrap(out_data, (rate,), backward)
