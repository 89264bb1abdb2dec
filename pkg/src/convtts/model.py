"""Encoder, decoder, and converter networks plus the multi-task objective.

The encoder turns symbol ids into per-timestep attention keys and values;
the causal decoder predicts groups of r mel frames autoregressively through
stacked conv + attention layers; the non-causal converter maps decoder
hidden states to linear-spectrogram (and optionally WORLD vocoder
parameter) predictions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .blocks import SQRT_HALF, AttentionBlock, ConvBlock, RateHead
from .checkpoint import read_checkpoint, write_checkpoint
from .config import ModelConfig
from .layers import RELU_GAIN, Embedding, WeightNormLinear, dropout
from .tensor import Tensor
from .text import SymbolSequence, SymbolTable


@dataclass
class FeatureStats:
    """Corpus normalization statistics, stored in every checkpoint."""

    mel_mean: np.ndarray
    mel_std: np.ndarray
    lin_mean: np.ndarray
    lin_std: np.ndarray
    position_ratio: float

    @classmethod
    def identity(cls, config: ModelConfig) -> "FeatureStats":
        return cls(np.zeros(config.mel_bands), np.ones(config.mel_bands),
                   np.zeros(config.freq_bins), np.ones(config.freq_bins),
                   float(config.position_rate))

    def normalize_mel(self, x):
        return (x - self.mel_mean) / self.mel_std

    def denormalize_mel(self, x):
        return x * self.mel_std + self.mel_mean

    def normalize_linear(self, x):
        return (x - self.lin_mean) / self.lin_std

    def denormalize_linear(self, x):
        return x * self.lin_std + self.lin_mean

    def arrays(self):
        return {
            "stats.mel_mean": self.mel_mean, "stats.mel_std": self.mel_std,
            "stats.lin_mean": self.lin_mean, "stats.lin_std": self.lin_std,
            "stats.position_ratio": np.asarray([self.position_ratio]),
        }

    @classmethod
    def from_arrays(cls, arrays) -> "FeatureStats":
        return cls(arrays["stats.mel_mean"], arrays["stats.mel_std"],
                   arrays["stats.lin_mean"], arrays["stats.lin_std"],
                   float(arrays["stats.position_ratio"][0]))


@dataclass
class EncoderOutput:
    keys: Tensor        # h_k, (T_enc, e)
    values: Tensor      # h_v = sqrt(0.5) * (h_k + h_e)
    embeddings: Tensor  # h_e, kept for inspection


@dataclass
class DecoderOutput:
    mel: Tensor                  # (groups * r, mel_bands), normalized domain
    done_logits: Tensor          # (groups,)
    hidden: Tensor               # (groups, channels)
    records: list                # one AttentionRecord per attention layer
    frame_mask: np.ndarray       # (groups * r,) 1.0 on real frames
    done_targets: np.ndarray     # (groups,)


@dataclass
class WorldOutput:
    voiced_logits: Tensor        # (frames,)
    f0: Tensor                   # (frames,)
    envelope: Tensor             # (frames, env_dims)
    aperiodicity: Tensor         # (frames, ap_dims)


@dataclass
class ConverterOutput:
    linear: Tensor               # (frames, F), normalized domain
    world: WorldOutput | None = None


@dataclass
class WorldTargets:
    voiced: np.ndarray
    f0: np.ndarray
    envelope: np.ndarray
    aperiodicity: np.ndarray


@dataclass
class Targets:
    """Per-utterance training targets, already normalized and r-padded."""

    mel: np.ndarray              # (groups * r, mel_bands)
    linear: np.ndarray           # (groups * r, F)
    n_real: int
    world: WorldTargets | None = None


class Encoder:
    def __init__(self, config: ModelConfig, vocab, rng, dtype):
        c = config.encoder_channels
        sdim = config.speaker_embedding_dim if config.multi_speaker else None
        self.embed = Embedding(vocab, config.embedding_dim, rng, dtype=dtype)
        self.fc_in = WeightNormLinear(config.embedding_dim, c, rng, dtype=dtype)
        self.blocks = [
            ConvBlock(c, config.encoder_conv_width, rng, causal=False,
                      keep_prob=config.dropout_keep, speaker_dim=sdim,
                      gain=config.glu_init_gain, dtype=dtype)
            for _ in range(config.encoder_layers)
        ]
        self.fc_out = WeightNormLinear(c, config.embedding_dim, rng, dtype=dtype)

    def __call__(self, ids, speaker=None, training=False, rng=None) -> EncoderOutput:
        h_e = self.embed(ids)
        x = self.fc_in(h_e)
        for block in self.blocks:
            x = block(x, speaker=speaker, training=training, rng=rng)
        h_k = self.fc_out(x)
        h_v = (h_k + h_e) * SQRT_HALF
        return EncoderOutput(keys=h_k, values=h_v, embeddings=h_e)

    def params(self, prefix="encoder"):
        out = self.embed.params(prefix + ".embed")
        out += self.fc_in.params(prefix + ".fc_in")
        for i, b in enumerate(self.blocks):
            out += b.params(f"{prefix}.block{i}")
        out += self.fc_out.params(prefix + ".fc_out")
        return out


class Decoder:
    def __init__(self, config: ModelConfig, rng, dtype):
        self.config = config
        r, mel = config.reduction_factor, config.mel_bands
        c = config.decoder_affine_sizes[-1]
        sdim = config.speaker_embedding_dim if config.multi_speaker else None
        self.prenet = []
        in_dim = r * mel
        for size in config.decoder_affine_sizes:
            self.prenet.append(WeightNormLinear(in_dim, size, rng,
                                                gain=RELU_GAIN, dtype=dtype))
            in_dim = size
        self.layers = []
        for _ in range(config.decoder_layers):
            conv = ConvBlock(c, config.decoder_conv_width, rng, causal=True,
                             keep_prob=config.dropout_keep, speaker_dim=sdim,
                             gain=config.glu_init_gain, dtype=dtype)
            attn = AttentionBlock(c, config.embedding_dim,
                                  config.attention_hidden, c, rng,
                                  keep_prob=config.dropout_keep,
                                  position_weight=config.position_weight,
                                  dtype=dtype)
            self.layers.append((conv, attn))
        self.head = WeightNormLinear(c, r * mel + 1, rng, dtype=dtype)

    def prenet_forward(self, x, training=False, rng=None):
        # dropout before every affine layer except the first
        for i, fc in enumerate(self.prenet):
            if i > 0:
                x = dropout(x, self.config.dropout_keep, training, rng)
            x = T.relu(fc(x))
        return x

    def __call__(self, enc: EncoderOutput, target_mel, n_real, rates,
                 speaker=None, training=False, rng=None) -> DecoderOutput:
        """Teacher-forced decode over ground-truth frame groups."""
        config = self.config
        r, mel = config.reduction_factor, config.mel_bands
        if target_mel.shape[1] != mel:
            raise ValueError(f"expected {mel} mel bands, got {target_mel.shape[1]}")
        if not 1 <= n_real <= len(target_mel):
            raise ValueError(f"n_real={n_real} outside [1, {len(target_mel)}]")
        groups = -(-n_real // r)
        padded = np.zeros((groups * r, mel), dtype=target_mel.dtype)
        padded[:min(n_real, len(target_mel))] = target_mel[:n_real]
        flat = padded.reshape(groups, r * mel)
        inputs = np.zeros_like(flat)
        inputs[1:] = flat[:-1]

        key_rate, query_rate = rates
        query_rate_eff = query_rate * float(r)  # query positions count frames

        x = self.prenet_forward(Tensor(inputs), training=training, rng=rng)
        records = []
        for conv, attn in self.layers:
            h = conv(x, speaker=speaker, training=training, rng=rng)
            ctx, record = attn(h, enc.keys, enc.values, query_rate_eff,
                               key_rate, window=None, training=training, rng=rng)
            records.append(record)
            x = (h + ctx) * SQRT_HALF
        out = self.head(x)
        mel_pred = T.reshape(out[:, : r * mel], (groups * r, mel))
        done_logits = T.reshape(out[:, r * mel :], (groups,))

        frame_mask = np.zeros(groups * r, dtype=target_mel.dtype)
        frame_mask[:n_real] = 1.0
        done_targets = np.zeros(groups, dtype=target_mel.dtype)
        done_targets[groups - 1] = 1.0
        return DecoderOutput(mel=mel_pred, done_logits=done_logits, hidden=x,
                             records=records, frame_mask=frame_mask,
                             done_targets=done_targets)

    def params(self, prefix="decoder"):
        out = []
        for i, fc in enumerate(self.prenet):
            out += fc.params(f"{prefix}.prenet{i}")
        for i, (conv, attn) in enumerate(self.layers):
            out += conv.params(f"{prefix}.layer{i}.conv")
            out += attn.params(f"{prefix}.layer{i}.attn")
        out += self.head.params(prefix + ".head")
        return out


class Converter:
    def __init__(self, config: ModelConfig, rng, dtype):
        self.config = config
        c = config.converter_channels
        r = config.reduction_factor
        sdim = config.speaker_embedding_dim if config.multi_speaker else None
        self.fc_in = WeightNormLinear(config.decoder_affine_sizes[-1], c, rng, dtype=dtype)
        self.blocks = [
            ConvBlock(c, config.converter_conv_width, rng, causal=False,
                      keep_prob=config.dropout_keep, speaker_dim=sdim,
                      gain=config.glu_init_gain, dtype=dtype)
            for _ in range(config.converter_layers)
        ]
        self.linear_head = WeightNormLinear(c, r * config.freq_bins, rng, dtype=dtype)
        self.world_heads = None
        if config.world_head:
            env, ap = config.world_envelope_dims, config.world_aperiodicity_dims
            self.world_heads = {
                "voiced": WeightNormLinear(c, r, rng, dtype=dtype),
                "f0": WeightNormLinear(c, r, rng, dtype=dtype),
                "envelope": WeightNormLinear(c, r * env, rng, dtype=dtype),
                "aperiodicity": WeightNormLinear(c, r * ap, rng, dtype=dtype),
            }

    def __call__(self, hidden, speaker=None, training=False, rng=None) -> ConverterOutput:
        config = self.config
        groups = hidden.data.shape[0]
        r, F = config.reduction_factor, config.freq_bins
        x = self.fc_in(hidden)
        for block in self.blocks:
            x = block(x, speaker=speaker, training=training, rng=rng)
        linear = T.reshape(self.linear_head(x), (groups * r, F))
        world = None
        if self.world_heads is not None:
            env, ap = config.world_envelope_dims, config.world_aperiodicity_dims
            world = WorldOutput(
                voiced_logits=T.reshape(self.world_heads["voiced"](x), (groups * r,)),
                f0=T.reshape(self.world_heads["f0"](x), (groups * r,)),
                envelope=T.reshape(self.world_heads["envelope"](x), (groups * r, env)),
                aperiodicity=T.reshape(self.world_heads["aperiodicity"](x), (groups * r, ap)),
            )
        return ConverterOutput(linear=linear, world=world)

    def params(self, prefix="converter"):
        out = self.fc_in.params(prefix + ".fc_in")
        for i, b in enumerate(self.blocks):
            out += b.params(f"{prefix}.block{i}")
        out += self.linear_head.params(prefix + ".linear_head")
        if self.world_heads is not None:
            for name, head in self.world_heads.items():
                out += head.params(f"{prefix}.world_{name}")
        return out


def _masked_l1(pred, target, mask, n_elems):
    diff = T.absolute(pred - Tensor(target))
    if mask is not None:
        diff = diff * Tensor(mask)
    return T.tsum(diff) * (1.0 / n_elems)


def _bce_with_logits(logits, targets, mask=None, n=None):
    # softplus(z) - z*t, stable for any logit sign
    t = Tensor(targets)
    loss = T.softplus(logits) - logits * t
    if mask is not None:
        loss = loss * Tensor(mask)
    n = n if n is not None else targets.size
    return T.tsum(loss) * (1.0 / n)


def total_loss(dec: DecoderOutput, conv: ConverterOutput, targets: Targets,
               config: ModelConfig):
    """Weighted multi-task objective; padding frames are masked everywhere.

    Returns the scalar loss tensor and a per-term breakdown whose weighted
    sum reproduces the total exactly.
    """
    mel_bands = config.mel_bands
    n_real = targets.n_real
    col_mask = dec.frame_mask[:, None]

    terms = {}
    terms["mel_l1"] = _masked_l1(dec.mel, targets.mel, col_mask, n_real * mel_bands)
    terms["done_bce"] = _bce_with_logits(dec.done_logits, dec.done_targets)
    terms["linear_l1"] = _masked_l1(conv.linear, targets.linear, col_mask,
                                    n_real * config.freq_bins)
    weights = {
        "mel_l1": config.mel_loss_weight,
        "done_bce": config.done_loss_weight,
        "linear_l1": config.linear_loss_weight,
    }
    if conv.world is not None:
        if targets.world is None:
            raise ValueError("WORLD head is enabled but targets carry no WORLD data")
        w = targets.world
        fm = dec.frame_mask
        terms["voiced_bce"] = _bce_with_logits(conv.world.voiced_logits, w.voiced,
                                               mask=fm, n=n_real)
        terms["f0_l1"] = _masked_l1(conv.world.f0, w.f0, fm, n_real)
        terms["envelope_l1"] = _masked_l1(conv.world.envelope, w.envelope,
                                          fm[:, None], n_real * w.envelope.shape[1])
        terms["aperiodicity_l1"] = _masked_l1(conv.world.aperiodicity, w.aperiodicity,
                                              fm[:, None], n_real * w.aperiodicity.shape[1])
        weights.update({
            "voiced_bce": config.voiced_loss_weight,
            "f0_l1": config.f0_loss_weight,
            "envelope_l1": config.envelope_loss_weight,
            "aperiodicity_l1": config.aperiodicity_loss_weight,
        })

    total = None
    breakdown = {}
    for name, term in terms.items():
        breakdown[name] = float(term.data)
        weighted = term * weights[name]
        total = weighted if total is None else total + weighted
    return total, breakdown


class Model:
    """Complete acoustic model with its config, symbol table, and stats."""

    def __init__(self, config: ModelConfig, seed=0):
        self.config = config
        self.dtype = np.float64 if config.precision == "double" else np.float32
        self.table = (SymbolTable.with_phonemes() if config.mixed_inputs
                      else SymbolTable.characters_only())
        rng = np.random.default_rng(seed)
        self.encoder = Encoder(config, len(self.table), rng, self.dtype)
        self.decoder = Decoder(config, rng, self.dtype)
        self.converter = Converter(config, rng, self.dtype)
        self.speaker_embed = None
        self.key_rate_head = None
        self.query_rate_head = None
        if config.multi_speaker:
            self.speaker_embed = Embedding(config.num_speakers,
                                           config.speaker_embedding_dim, rng,
                                           scale=config.speaker_embedding_scale,
                                           dtype=self.dtype)
            self.key_rate_head = RateHead(config.speaker_embedding_dim,
                                          config.position_rate, rng, dtype=self.dtype)
            self.query_rate_head = RateHead(config.speaker_embedding_dim,
                                            1.0, rng, dtype=self.dtype)
        self.stats = FeatureStats.identity(config)

    # -- wiring ------------------------------------------------------------

    def set_position_ratio(self, ratio: float):
        """Install the measured dataset output/input timestep ratio."""
        if not ratio > 0:
            raise ValueError(f"dataset ratio must be positive, got {ratio}")
        self.stats.position_ratio = float(ratio)
        if self.key_rate_head is not None:
            self.key_rate_head.set_target(ratio)

    def speaker_vector(self, speaker_id):
        if self.speaker_embed is None:
            return None
        n = self.config.num_speakers
        if not 0 <= speaker_id < n:
            raise ValueError(f"speaker id {speaker_id} outside [0, {n})")
        return self.speaker_embed(np.asarray([speaker_id]))

    def rates_for(self, speaker_vec):
        if self.speaker_embed is None:
            return self.stats.position_ratio, 1.0
        return (self.key_rate_head(speaker_vec),
                self.query_rate_head(speaker_vec))

    def encode(self, seq: SymbolSequence, training=False, rng=None):
        speaker = self.speaker_vector(seq.speaker_id)
        ids = np.asarray(seq.ids)
        return self.encoder(ids, speaker=speaker, training=training, rng=rng), speaker

    def decode_teacher_forced(self, enc, target_mel, n_real, speaker=None,
                              training=False, rng=None):
        rates = self.rates_for(speaker)
        return self.decoder(enc, target_mel, n_real, rates, speaker=speaker,
                            training=training, rng=rng)

    def convert(self, hidden, speaker=None, training=False, rng=None):
        return self.converter(hidden, speaker=speaker, training=training, rng=rng)

    def forward_teacher(self, seq: SymbolSequence, targets: Targets,
                        training=False, rng=None):
        enc, speaker = self.encode(seq, training=training, rng=rng)
        dec = self.decode_teacher_forced(enc, targets.mel, targets.n_real,
                                         speaker=speaker, training=training, rng=rng)
        conv = self.convert(dec.hidden, speaker=speaker, training=training, rng=rng)
        loss, breakdown = total_loss(dec, conv, targets, self.config)
        return loss, breakdown, dec, conv

    def prepare_targets(self, mel, linear, n_real=None, world=None) -> Targets:
        """Pad normalized features to whole frame groups."""
        r = self.config.reduction_factor
        n_real = len(mel) if n_real is None else n_real
        groups = -(-n_real // r)
        out_mel = np.zeros((groups * r, mel.shape[1]), dtype=self.dtype)
        out_mel[:n_real] = mel[:n_real]
        out_lin = np.zeros((groups * r, linear.shape[1]), dtype=self.dtype)
        out_lin[:n_real] = linear[:n_real]
        return Targets(mel=out_mel, linear=out_lin, n_real=n_real, world=world)

    # -- persistence ---------------------------------------------------------

    def params(self):
        out = self.encoder.params() + self.decoder.params() + self.converter.params()
        if self.speaker_embed is not None:
            out += self.speaker_embed.params("speaker.embed")
            out += self.key_rate_head.params("speaker.key_rate")
            out += self.query_rate_head.params("speaker.query_rate")
        return out

    def param_dict(self):
        return dict(self.params())

    def zero_grads(self):
        for _, p in self.params():
            p.zero_grad()

    def save(self, path, extra_arrays=None, extra_meta=None):
        arrays = {name: p.data for name, p in self.params()}
        arrays.update(self.stats.arrays())
        if extra_arrays:
            arrays.update(extra_arrays)
        meta = {"config": self.config.to_text(), "kind": "convtts-model"}
        if extra_meta:
            meta.update(extra_meta)
        write_checkpoint(path, arrays, meta)

    @classmethod
    def load(cls, path):
        """Returns (model, extra_arrays, meta); extras keep their prefixes."""
        arrays, meta = read_checkpoint(path)
        config = ModelConfig.from_text(meta["config"])
        model = cls(config, seed=0)
        named = dict(model.params())
        stats_arrays = {}
        extras = {}
        for name, arr in arrays.items():
            if name in named:
                p = named[name]
                if p.data.shape != arr.shape:
                    raise ValueError(f"shape mismatch for {name}: "
                                     f"{p.data.shape} vs {arr.shape}")
                p.data = arr.astype(model.dtype, copy=True)
            elif name.startswith("stats."):
                stats_arrays[name] = arr
            else:
                extras[name] = arr
        if stats_arrays:
            model.stats = FeatureStats.from_arrays(stats_arrays)
        return model, extras, meta
