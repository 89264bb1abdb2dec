"""Autoregressive synthesis with the monotonic attention constraint.

The inference engine folds every weight-normalized parameter into plain
arrays once, then decodes step by step through preallocated scratch
buffers: incremental causal convolutions read k-1 past inputs from ring
buffers, attention keys are projected once per utterance, and no scratch
memory is allocated after a stream is created.  All products use the same
fixed-order accumulation as the training graph, so driving the fused path
with ground-truth frames reproduces teacher-forced decoding bit for bit
(at matching precision).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .audio import Waveform, griffin_lim
from .blocks import SQRT_HALF, AttentionRecord, positional_encoding
from .model import Model
from .tensor import MASK_VALUE, _sigmoid_np, no_grad, row_matmul
from .text import SymbolSequence


class StreamDone(RuntimeError):
    """decode_step called on a stream whose done flag is already set."""


def _fold(layer, dtype):
    """Effective (weight, bias) of a weight-normalized layer."""
    with no_grad():
        w = layer.weight().data
    return w.astype(dtype, copy=True), layer.bias.data.astype(dtype, copy=True)


def _lin(x, wb):
    w, b = wb
    return np.einsum("ij,jk->ik", x, w) + b


@dataclass
class _FoldedBlock:
    conv_w: np.ndarray       # (k, c, 2c)
    conv_b: np.ndarray
    speaker_proj: tuple | None
    causal: bool

    def speaker_bias(self, speaker_vec):
        if self.speaker_proj is None or speaker_vec is None:
            return None
        z = row_matmul(speaker_vec, self.speaker_proj[0]) + self.speaker_proj[1]
        return z / (1.0 + np.abs(z))  # softsign

    def forward_sequence(self, x, sbias=None):
        """Whole-sequence conv block (used by encoder/converter passes)."""
        k = self.conv_w.shape[0]
        left = k - 1 if self.causal else (k - 1) // 2
        right = 0 if self.causal else (k - 1) // 2
        t = x.shape[0]
        xp = np.pad(x, ((left, right), (0, 0)))
        z = np.einsum("ij,jk->ik", xp[0:t], self.conv_w[0])
        for j in range(1, k):
            z += np.einsum("ij,jk->ik", xp[j : j + t], self.conv_w[j])
        z += self.conv_b
        c = self.conv_w.shape[2] // 2
        value = z[:, :c]
        if sbias is not None:
            value = value + sbias
        gated = value * _sigmoid_np(z[:, c:])
        return (x + gated) * SQRT_HALF


class Workspace:
    """Named preallocated scratch buffers with an allocation counter."""

    def __init__(self, dtype):
        self.dtype = dtype
        self._bufs = {}
        self.alloc_count = 0

    def get(self, name, shape):
        buf = self._bufs.get(name)
        if buf is None or buf.shape != tuple(shape):
            buf = np.empty(shape, dtype=self.dtype)
            self._bufs[name] = buf
            self.alloc_count += 1
        return buf


@dataclass
class SynthResult:
    mel: np.ndarray              # (steps * r, mel_bands), denormalized log-mel
    linear: np.ndarray           # (frames, F), denormalized log-magnitude
    wave: Waveform
    records: list                # AttentionRecord per decoder attention layer
    truncated: bool
    steps: int


class InferenceEngine:
    """Read-only folded weights; every stream owns all mutable state."""

    def __init__(self, model: Model, dtype=None):
        cfg = model.config
        self.config = cfg
        self.stats = model.stats
        self.table = model.table
        self.dtype = np.dtype(dtype) if dtype is not None else model.dtype

        d = self.dtype
        self.embed = model.encoder.embed.weight.data.astype(d, copy=True)
        self.enc_fc_in = _fold(model.encoder.fc_in, d)
        self.enc_fc_out = _fold(model.encoder.fc_out, d)
        self.enc_blocks = [self._fold_block(b, d) for b in model.encoder.blocks]
        self.prenet = [_fold(fc, d) for fc in model.decoder.prenet]
        self.layers = []
        for conv, attn in model.decoder.layers:
            self.layers.append({
                "block": self._fold_block(conv, d),
                "wq": _fold(attn.query_proj, d),
                "wk": _fold(attn.key_proj, d),
                "wo": _fold(attn.out_proj, d),
                "hidden": attn.hidden,
                "position_weight": attn.position_weight,
            })
        self.head = _fold(model.decoder.head, d)
        self.conv_fc_in = _fold(model.converter.fc_in, d)
        self.conv_blocks = [self._fold_block(b, d) for b in model.converter.blocks]
        self.linear_head = _fold(model.converter.linear_head, d)
        self.speaker_embed = None
        self.rate_heads = None
        if model.speaker_embed is not None:
            self.speaker_embed = model.speaker_embed.weight.data.astype(d, copy=True)
            self.rate_heads = (_fold(model.key_rate_head.linear, d),
                               _fold(model.query_rate_head.linear, d))

    @staticmethod
    def _fold_block(block, dtype):
        proj = None
        if block.speaker_proj is not None:
            proj = _fold(block.speaker_proj, dtype)
        return _FoldedBlock(conv_w=_fold(block.conv, dtype)[0],
                            conv_b=block.conv.bias.data.astype(dtype, copy=True),
                            speaker_proj=proj, causal=block.causal)

    # -- per-utterance precomputation -----------------------------------------

    def speaker_vector(self, speaker_id):
        if self.speaker_embed is None:
            return None
        return self.speaker_embed[speaker_id]

    def rates(self, speaker_vec):
        if self.rate_heads is None:
            return float(self.stats.position_ratio), 1.0
        out = []
        for w, b in self.rate_heads:
            z = float(row_matmul(speaker_vec, w) + b)
            out.append(float(np.log1p(np.exp(-abs(z))) + max(z, 0.0)))  # softplus
        return out[0], out[1]

    def encode(self, seq: SymbolSequence):
        ids = np.asarray(seq.ids)
        if ids.min() < 0 or ids.max() >= self.embed.shape[0]:
            raise ValueError("symbol id outside embedding range")
        speaker = self.speaker_vector(seq.speaker_id)
        h_e = self.embed[ids]
        x = _lin(h_e, self.enc_fc_in)
        for block in self.enc_blocks:
            x = block.forward_sequence(x, block.speaker_bias(speaker))
        h_k = _lin(x, self.enc_fc_out)
        h_v = (h_k + h_e) * SQRT_HALF
        return h_k, h_v, speaker

    def convert(self, hidden, speaker=None):
        """Non-causal converter over the full decoder hidden sequence."""
        x = _lin(hidden, self.conv_fc_in)
        for block in self.conv_blocks:
            x = block.forward_sequence(x, block.speaker_bias(speaker))
        groups = x.shape[0]
        r, fbins = self.config.reduction_factor, self.config.freq_bins
        return _lin(x, self.linear_head).reshape(groups * r, fbins)

    def new_stream(self, seq: SymbolSequence, constraint=True,
                   constrained_layers=None, max_steps=None):
        return DecodingStream(self, seq, constraint, constrained_layers, max_steps)

    def synthesize(self, seq: SymbolSequence, constraint=True,
                   constrained_layers=None, max_steps=None, gl_seed=0,
                   gl_iterations=None):
        """Full pipeline: autoregressive decode, converter, Griffin-Lim."""
        stream = self.new_stream(seq, constraint, constrained_layers, max_steps)
        while not stream.done and stream.step < stream.max_steps:
            stream.decode_step()
        truncated = not stream.done
        hidden = stream.hidden_states()
        linear_norm = self.convert(hidden, speaker=stream.speaker)
        mel_norm = stream.mel_frames()
        mel = self.stats.denormalize_mel(mel_norm.astype(np.float64))
        linear = self.stats.denormalize_linear(linear_norm.astype(np.float64))
        iters = (self.config.griffin_lim_iterations
                 if gl_iterations is None else gl_iterations)
        wave = griffin_lim(linear, self.config.spectro(), iterations=iters,
                           seed=gl_seed)
        return SynthResult(mel=mel, linear=linear, wave=wave,
                           records=stream.records(), truncated=truncated,
                           steps=stream.step)


class DecodingStream:
    """All mutable decoding state for one utterance.

    Ring buffers hold the previous k-1 inputs of every causal conv layer;
    per-layer attention positions are tracked independently (the monotonic
    window of each constrained layer advances from its own argmax).
    """

    def __init__(self, engine: InferenceEngine, seq: SymbolSequence,
                 constraint=True, constrained_layers=None, max_steps=None):
        cfg = engine.config
        self.engine = engine
        self.config = cfg
        d = engine.dtype
        h_k, h_v, speaker = engine.encode(seq)
        self.speaker = speaker
        self.t_enc = h_k.shape[0]
        self.values = h_v
        key_rate, query_rate = engine.rates(speaker)
        r = cfg.reduction_factor
        if max_steps is None:
            expected = engine.stats.position_ratio * self.t_enc / r
            max_steps = max(1, int(np.ceil(cfg.max_steps_factor * expected)))
        if max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        self.max_steps = max_steps
        if constrained_layers is None:
            constrained_layers = cfg.constrained_layers
        n_layers = len(engine.layers)
        self.constrained = (set(i for i in constrained_layers if i < n_layers)
                            if constraint else set())
        self.window_width = cfg.attention_window

        c = cfg.decoder_affine_sizes[-1]
        mel, a = cfg.mel_bands, cfg.attention_hidden
        # key projections and positional tables are fixed for the stream
        self.keys_t = []
        pw = cfg.position_weight
        pe_k = positional_encoding(self.t_enc, cfg.embedding_dim, key_rate,
                                   weight=pw).astype(d)
        for layer in engine.layers:
            kh = _lin(h_k + pe_k, layer["wk"])
            self.keys_t.append(np.ascontiguousarray(kh.T))
        # query positions advance r frames per decoder step
        self.pe_q = positional_encoding(max_steps, c, query_rate * r,
                                        weight=pw).astype(d)
        self.sbias = [layer["block"].speaker_bias(speaker)
                      for layer in engine.layers]

        k = cfg.decoder_conv_width
        self.ring = [np.zeros((k - 1, c), dtype=d) for _ in range(n_layers)]
        self.prev_group = np.zeros(r * mel, dtype=d)
        self.positions = [0] * n_layers
        self.weights_log = [np.zeros((max_steps, self.t_enc), dtype=d)
                            for _ in range(n_layers)]
        self.argmax_log = [np.zeros(max_steps, dtype=np.int64)
                           for _ in range(n_layers)]
        self.clamped_log = [[] for _ in range(n_layers)]
        self.hidden_log = np.zeros((max_steps, c), dtype=d)
        self.mel_log = np.zeros((max_steps, r * mel), dtype=d)
        self.done = False
        self.step = 0

        self.ws = Workspace(d)
        # warm up every scratch buffer so decode_step never allocates
        sizes = {"q": c, "qh": a, "ctx": cfg.embedding_dim, "attn_out": c,
                 "z": 2 * c, "glu": c, "val": c, "head": r * mel + 1,
                 "logits": self.t_enc, "mask": self.t_enc, "x": c, "done": 1}
        for i, size in enumerate(s[1] for s in self.prenet_sizes()):
            sizes[f"pre{i}"] = size
        for name, size in sizes.items():
            self.ws.get(name, (size,))
        self.warmup_allocs = self.ws.alloc_count

    def prenet_sizes(self):
        return [(w.shape[0], w.shape[1]) for w, _ in self.engine.prenet]

    # -- the fused step -------------------------------------------------------

    def decode_step(self, force_input=None):
        """One autoregressive step; returns the predicted frame group (r, mel).

        ``force_input`` substitutes the fed-back group (teacher forcing
        through the identical code path).
        """
        if self.done:
            raise StreamDone("stream already done")
        if self.step >= self.max_steps:
            raise StreamDone("stream exhausted max_steps")
        engine = self.engine
        cfg = self.config
        ws = self.ws
        r, mel = cfg.reduction_factor, cfg.mel_bands
        c = cfg.decoder_affine_sizes[-1]

        x = force_input if force_input is not None else self.prev_group
        for i, (w, b) in enumerate(engine.prenet):
            buf = ws.get(f"pre{i}", (w.shape[1],))
            np.einsum("j,jk->k", x, w, out=buf)
            buf += b
            np.maximum(buf, 0.0, out=buf)
            x = buf

        cur = ws.get("x", (c,))
        np.copyto(cur, x)
        for li, layer in enumerate(engine.layers):
            block = layer["block"]
            k = block.conv_w.shape[0]
            ring = self.ring[li]
            z = ws.get("z", (2 * c,))
            if k == 1:
                np.einsum("j,jk->k", cur, block.conv_w[0], out=z)
            else:
                np.einsum("j,jk->k", ring[0], block.conv_w[0], out=z)
                for j in range(1, k - 1):
                    z += np.einsum("j,jk->k", ring[j], block.conv_w[j])
                z += np.einsum("j,jk->k", cur, block.conv_w[k - 1])
            z += block.conv_b
            # advance the ring buffer before cur is overwritten
            for j in range(k - 2):
                ring[j] = ring[j + 1]
            if k > 1:
                ring[k - 2] = cur
            g = ws.get("glu", (c,))
            _sigmoid_np(z[c:], out=g)
            if self.sbias[li] is not None:
                val = ws.get("val", (c,))
                np.add(z[:c], self.sbias[li], out=val)
                g *= val
            else:
                g *= z[:c]
            # conv block output: (input + gated) * sqrt(0.5)
            cur += g
            cur *= SQRT_HALF

            q = ws.get("q", (c,))
            np.add(cur, self.pe_q[self.step], out=q)
            qh = ws.get("qh", (layer["wq"][0].shape[1],))
            np.einsum("j,jk->k", q, layer["wq"][0], out=qh)
            qh += layer["wq"][1]
            logits = ws.get("logits", (self.t_enc,))
            np.einsum("j,jk->k", qh, self.keys_t[li], out=logits)
            logits *= 1.0 / np.sqrt(layer["hidden"])
            if li in self.constrained:
                mask = ws.get("mask", (self.t_enc,))
                mask.fill(MASK_VALUE)
                last = self.positions[li]
                if last >= self.t_enc:
                    self.clamped_log[li].append(self.step)
                    last = self.t_enc - 1
                lo, hi = last, min(last + self.window_width, self.t_enc)
                mask[lo:hi] = 0.0
                logits += mask
            logits -= logits.max()
            np.exp(logits, out=logits)
            logits /= logits.sum()
            self.weights_log[li][self.step] = logits
            best = int(np.argmax(logits))
            self.argmax_log[li][self.step] = best
            if li in self.constrained:
                self.positions[li] = best

            ctx = ws.get("ctx", (cfg.embedding_dim,))
            np.einsum("j,jk->k", logits, self.values, out=ctx)
            ctx *= np.sqrt(self.t_enc)
            out = ws.get("attn_out", (c,))
            np.einsum("j,jk->k", ctx, layer["wo"][0], out=out)
            out += layer["wo"][1]
            cur += out
            cur *= SQRT_HALF

        self.hidden_log[self.step] = cur
        head = ws.get("head", (r * mel + 1,))
        np.einsum("j,jk->k", cur, engine.head[0], out=head)
        head += engine.head[1]
        self.mel_log[self.step] = head[: r * mel]
        self.prev_group = self.mel_log[self.step]
        done_prob = float(_sigmoid_np(head[r * mel :], out=ws.get("done", (1,)))[0])
        self.step += 1
        if done_prob > cfg.done_threshold:
            self.done = True
        return self.mel_log[self.step - 1].reshape(r, mel)

    # -- results ----------------------------------------------------------------

    def hidden_states(self):
        return self.hidden_log[: self.step]

    def mel_frames(self):
        r, mel = self.config.reduction_factor, self.config.mel_bands
        return self.mel_log[: self.step].reshape(self.step * r, mel)

    def records(self):
        out = []
        for li in range(len(self.engine.layers)):
            out.append(AttentionRecord(
                weights=self.weights_log[li][: self.step].copy(),
                argmax_path=self.argmax_log[li][: self.step].copy(),
                clamped_steps=list(self.clamped_log[li])))
        return out


def fused_decode_step(stream: DecodingStream, force_input=None):
    """Single fused autoregressive step (module-level convenience)."""
    return stream.decode_step(force_input=force_input)


def synthesize(model_or_engine, seq: SymbolSequence, constraint=True,
               constrained_layers=None, max_steps=None, gl_seed=0,
               gl_iterations=None, dtype=None) -> SynthResult:
    """Synthesize one utterance; accepts a Model or a prebuilt engine."""
    engine = (model_or_engine if isinstance(model_or_engine, InferenceEngine)
              else InferenceEngine(model_or_engine, dtype=dtype))
    return engine.synthesize(seq, constraint=constraint,
                             constrained_layers=constrained_layers,
                             max_steps=max_steps, gl_seed=gl_seed,
                             gl_iterations=gl_iterations)
