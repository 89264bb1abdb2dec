"""Composite network units: gated residual conv block, positional encodings,
and the dot-product attention block with the inference-time monotonic window.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .layers import GLU_CONV_GAIN, WeightNormConv1d, WeightNormLinear, dropout
from .tensor import MASK_VALUE, Tensor

SQRT_HALF = float(np.sqrt(0.5))


class ConvBlock:
    """1-D conv to 2c channels, GLU gate, residual, sqrt(0.5) rescale.

    In multi-speaker mode a projected, softsign-squashed speaker embedding
    is added to the value half of the conv output before gating.
    """

    def __init__(self, channels, width, rng, causal=False, keep_prob=1.0,
                 speaker_dim=None, gain=GLU_CONV_GAIN, dtype=np.float64):
        self.channels = channels
        self.keep_prob = keep_prob
        self.causal = causal
        self.conv = WeightNormConv1d(channels, 2 * channels, width, rng,
                                     causal=causal, gain=gain, dtype=dtype)
        self.speaker_proj = None
        if speaker_dim:
            self.speaker_proj = WeightNormLinear(speaker_dim, channels, rng, dtype=dtype)

    def __call__(self, x, speaker=None, training=False, rng=None):
        if (speaker is not None) != (self.speaker_proj is not None):
            raise ValueError(
                "speaker embedding supplied to a single-speaker block"
                if self.speaker_proj is None
                else "multi-speaker block called without a speaker embedding"
            )
        h = dropout(x, self.keep_prob, training, rng)
        z = self.conv(h)
        bias = None
        if speaker is not None:
            bias = T.softsign(self.speaker_proj(speaker))
        gated = T.glu(z, value_bias=bias)
        return (x + gated) * SQRT_HALF

    def params(self, prefix):
        out = self.conv.params(prefix + ".conv")
        if self.speaker_proj is not None:
            out += self.speaker_proj.params(prefix + ".speaker_proj")
        return out


@dataclass(frozen=True)
class PositionalEncodingSpec:
    channels: int
    rate: float

    def __post_init__(self):
        if self.channels % 2 != 0:
            raise ValueError("positional encoding channel count must be even")
        if not self.rate > 0:
            raise ValueError("position rate must be positive")


def positional_encoding(length, spec_or_channels, rate=None, weight=1.0) -> np.ndarray:
    """Sinusoidal position table, shape (length, channels).

    Channel k at timestep i is sin(rate*i / 10000^(k/d)) for even k and
    cos(...) for odd k.  ``weight`` scales the whole table.
    """
    if isinstance(spec_or_channels, PositionalEncodingSpec):
        channels, rate = spec_or_channels.channels, spec_or_channels.rate
    else:
        channels = spec_or_channels
        if rate is None:
            raise ValueError("rate required when channels given directly")
        PositionalEncodingSpec(channels, rate)  # validates
    pos = np.arange(length, dtype=np.float64)[:, None]
    chan = np.arange(channels)[None, :]
    phase = rate * pos / np.power(10000.0, chan / channels)
    return weight * np.where(chan % 2 == 0, np.sin(phase), np.cos(phase))


@dataclass
class AttentionRecord:
    """Per-layer attention trace: weight rows over encoder steps + argmax path."""

    weights: np.ndarray                       # (T_dec, T_enc)
    argmax_path: np.ndarray                   # (T_dec,) int
    clamped_steps: list = field(default_factory=list)

    def check(self, tol=1e-5):
        if np.any(self.weights < 0):
            raise AssertionError("negative attention weight")
        sums = self.weights.sum(axis=-1)
        if np.any(np.abs(sums - 1.0) > tol):
            raise AssertionError(f"attention row sums off by {np.abs(sums - 1).max():.2e}")

    def to_csv(self, path):
        header = ",".join(f"enc{j}" for j in range(self.weights.shape[1]))
        rows = [header + ",argmax"]
        for t in range(self.weights.shape[0]):
            vals = ",".join(repr(v) for v in self.weights[t])
            rows.append(f"{vals},{self.argmax_path[t]}")
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(rows) + "\n")


def window_mask(t_enc, last, width, dtype=np.float64):
    """Additive logit mask for the monotonic window [last, last+width).

    A window that has run off the end of the keys is clamped to the final
    key; callers can detect this via the second return value.
    """
    clamped = last >= t_enc
    lo = min(last, t_enc - 1)
    hi = min(lo + width, t_enc)
    mask = np.full((t_enc,), MASK_VALUE, dtype=dtype)
    mask[lo:hi] = 0.0
    return mask, clamped


class AttentionBlock:
    """Dot-product attention over encoder keys/values with positional bias.

    Positional encodings are added to queries and keys (at their own rates)
    before projection; the query and key projections start from identical
    weights so a fresh model already attends along the diagonal.  The
    context is rescaled by sqrt(T_enc) to keep its variance independent of
    input length, then linearly projected.
    """

    def __init__(self, query_dim, key_dim, hidden, out_dim, rng,
                 keep_prob=1.0, position_weight=1.0, dtype=np.float64):
        if query_dim != key_dim:
            raise ValueError(
                "query and key dims must match for the shared projection init")
        self.hidden = hidden
        self.keep_prob = keep_prob
        self.position_weight = position_weight
        v = rng.standard_normal((query_dim, hidden))
        self.query_proj = WeightNormLinear.from_direction(v, 1.0, dtype=dtype)
        self.key_proj = WeightNormLinear.from_direction(v.copy(), 1.0, dtype=dtype)
        self.out_proj = WeightNormLinear(key_dim, out_dim, rng, dtype=dtype)

    def _encoding(self, length, channels, rate, dtype):
        if isinstance(rate, Tensor):
            return T.sinusoid_encoding_t(rate, length, channels,
                                         weight=self.position_weight)
        return Tensor(positional_encoding(length, channels, rate,
                                          weight=self.position_weight).astype(dtype))

    def __call__(self, query, keys, values, query_rate, key_rate,
                 window=None, training=False, rng=None):
        if window is not None and training:
            raise ValueError("the monotonic window is an inference-only constraint")
        t_dec, qdim = query.data.shape
        t_enc, kdim = keys.data.shape
        dtype = query.data.dtype
        q = query + self._encoding(t_dec, qdim, query_rate, dtype)
        k = keys + self._encoding(t_enc, kdim, key_rate, dtype)
        qh = self.query_proj(q)
        kh = self.key_proj(k)
        logits = T.matmul(qh, T.transpose(kh)) * (1.0 / np.sqrt(self.hidden))
        mask = None
        clamped = []
        if window is not None:
            last, width = window
            mask_row, was_clamped = window_mask(t_enc, last, width, dtype)
            mask = np.broadcast_to(mask_row, (t_dec, t_enc))
            if was_clamped:
                clamped = list(range(t_dec))
        weights = T.softmax(logits, additive_mask=mask)
        record = AttentionRecord(
            weights=weights.data.copy(),
            argmax_path=np.argmax(weights.data, axis=-1),
            clamped_steps=clamped,
        )
        weights = dropout(weights, self.keep_prob, training, rng)
        context = T.matmul(weights, values) * float(np.sqrt(t_enc))
        return self.out_proj(context), record

    def params(self, prefix):
        return (self.query_proj.params(prefix + ".query_proj")
                + self.key_proj.params(prefix + ".key_proj")
                + self.out_proj.params(prefix + ".out_proj"))


def position_rates(dataset_ratio, key_head=None, query_head=None,
                   speaker_embedding=None):
    """Key/query position rates.

    Single-speaker mode (no heads): key rate is the dataset's ratio of
    output frames to input symbols, query rate is 1.  Multi-speaker mode
    evaluates the learned scalar heads on the speaker embedding.
    """
    if not dataset_ratio > 0:
        raise ValueError(f"dataset ratio must be positive, got {dataset_ratio}")
    if key_head is None:
        return float(dataset_ratio), 1.0
    if speaker_embedding is None:
        raise ValueError("multi-speaker rates need a speaker embedding")
    return key_head(speaker_embedding), query_head(speaker_embedding)


class RateHead:
    """Scalar softplus head on the speaker embedding, initialized to emit
    a fixed target rate for typical embeddings."""

    def __init__(self, speaker_dim, target, rng, dtype=np.float64):
        self.linear = WeightNormLinear(speaker_dim, 1, rng, gain=0.1, dtype=dtype)
        self.set_target(target)

    def set_target(self, target):
        # softplus(bias) == target when the embedding contribution is small
        self.linear.bias.data[:] = np.log(np.expm1(target))

    def __call__(self, speaker_embedding):
        out = self.linear(speaker_embedding)
        return T.softplus(out.reshape(()))

    def params(self, prefix):
        return self.linear.params(prefix)
