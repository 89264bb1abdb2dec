"""Weight-normalized primitive layers and the finite-difference checker.

Every weight matrix in the model is parametrized as a direction ``v`` and a
per-output-channel magnitude ``g``; the effective weight g * v / ||v|| is
recomputed from the live parameters on every forward pass, so the norm
constraint can never go stale during training.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor

# Magnitude init for the convolution feeding a GLU, calibrated once by Monte
# Carlo so a residual GLU block maps unit-variance input to ~unit-variance
# output (see ConvBlock in blocks.py).
GLU_CONV_GAIN = 1.7

# Magnitude init for a linear layer followed by ReLU (restores the variance
# the rectifier removes).
RELU_GAIN = float(np.sqrt(2.0))


class WeightNormLinear:
    """Affine map over the last axis with a weight-normalized matrix."""

    def __init__(self, in_dim, out_dim, rng, gain=1.0, dtype=np.float64):
        v = rng.standard_normal((in_dim, out_dim)).astype(dtype)
        self.v = Tensor(v, requires_grad=True)
        self.g = Tensor(np.full((out_dim,), gain, dtype=dtype), requires_grad=True)
        self.bias = Tensor(np.zeros((out_dim,), dtype=dtype), requires_grad=True)

    @classmethod
    def from_direction(cls, v, gain, dtype=np.float64):
        """Build a layer from an explicit direction matrix (shared inits)."""
        layer = cls.__new__(cls)
        layer.v = Tensor(np.array(v, dtype=dtype), requires_grad=True)
        out_dim = v.shape[1]
        layer.g = Tensor(np.full((out_dim,), gain, dtype=dtype), requires_grad=True)
        layer.bias = Tensor(np.zeros((out_dim,), dtype=dtype), requires_grad=True)
        return layer

    def weight(self):
        norm = T.sqrt(T.tsum(self.v * self.v, axis=0, keepdims=True))
        return self.v * (self.g / norm)

    def __call__(self, x):
        if x.data.shape[-1] != self.v.data.shape[0]:
            raise ValueError(
                f"linear layer expects {self.v.data.shape[0]} input channels, "
                f"got {x.data.shape[-1]}"
            )
        return T.matmul(x, self.weight()) + self.bias

    def params(self, prefix):
        return [(prefix + ".v", self.v), (prefix + ".g", self.g), (prefix + ".bias", self.bias)]


class WeightNormConv1d:
    """1-D convolution (time-major input) with weight-normalized filters."""

    def __init__(self, in_channels, out_channels, width, rng, causal=False,
                 gain=1.0, dtype=np.float64):
        if width % 2 == 0:
            raise ValueError(f"convolution width must be odd, got {width}")
        v = rng.standard_normal((width, in_channels, out_channels)).astype(dtype)
        self.v = Tensor(v, requires_grad=True)
        self.g = Tensor(np.full((out_channels,), gain, dtype=dtype), requires_grad=True)
        self.bias = Tensor(np.zeros((out_channels,), dtype=dtype), requires_grad=True)
        self.causal = causal

    def weight(self):
        norm = T.sqrt(T.tsum(self.v * self.v, axis=(0, 1), keepdims=True))
        return self.v * (self.g / norm)

    def __call__(self, x):
        return T.conv1d(x, self.weight(), causal=self.causal) + self.bias

    def params(self, prefix):
        return [(prefix + ".v", self.v), (prefix + ".g", self.g), (prefix + ".bias", self.bias)]


class Embedding:
    """Trainable lookup table, padding-friendly (index 0 is ordinary)."""

    def __init__(self, count, dim, rng, scale=1.0, dtype=np.float64):
        w = (scale * rng.standard_normal((count, dim))).astype(dtype)
        self.weight = Tensor(w, requires_grad=True)

    def __call__(self, ids):
        return T.embedding(self.weight, ids)

    def params(self, prefix):
        return [(prefix + ".weight", self.weight)]


def dropout(x, keep_prob, training, rng):
    """Inverted dropout: zero with prob 1-keep_prob, scale survivors by 1/keep_prob.

    Identity in eval mode, so inference needs no rescaling.
    """
    if not 0.0 < keep_prob <= 1.0:
        raise ValueError(f"keep_prob must be in (0, 1], got {keep_prob}")
    if not training or keep_prob == 1.0:
        return x
    rng = np.random.default_rng(rng) if isinstance(rng, (int, np.integer)) else rng
    mask = (rng.random(x.data.shape) < keep_prob).astype(x.data.dtype) / keep_prob
    return x * Tensor(mask)


def grad_check(f, params, epsilon=1e-5, max_coords=10_000, rng=None, floor=1e-4):
    """Compare reverse-mode gradients of ``f()`` against central differences.

    ``f`` rebuilds the scalar loss from the live parameter tensors each call.
    Checks every coordinate, or a random subset when the total exceeds
    ``max_coords``.  Returns the maximum relative error.
    """
    rng = np.random.default_rng(rng)
    for _, p in params:
        p.zero_grad()
    loss = f()
    loss.backward()
    analytic = {name: p.grad.copy() if p.grad is not None else np.zeros_like(p.data)
                for name, p in params}

    coords = []
    for name, p in params:
        for flat in range(p.data.size):
            coords.append((name, p, flat))
    if len(coords) > max_coords:
        picked = rng.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[i] for i in picked]

    worst = 0.0
    for name, p, flat in coords:
        idx = np.unravel_index(flat, p.data.shape)
        orig = p.data[idx]
        step = epsilon * (1.0 + abs(orig))
        p.data[idx] = orig + step
        f_plus = float(f().data)
        p.data[idx] = orig - step
        f_minus = float(f().data)
        p.data[idx] = orig
        numeric = (f_plus - f_minus) / (2.0 * step)
        a = analytic[name][idx]
        rel = abs(a - numeric) / max(abs(a), abs(numeric), floor)
        worst = max(worst, rel)
    return worst
