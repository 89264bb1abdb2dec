"""Model configuration: every tunable hyperparameter, serializable to a
human-readable key/value file and overridable from the environment.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, fields, replace

ENV_PREFIX = "CONVTTS_"

DISABLED = "-"


@dataclass
class ModelConfig:
    # audio / framing
    fft_size: int = 1024
    window_size: int = 800
    hop: int = 200
    sample_rate: int = 16000
    reduction_factor: int = 4
    mel_bands: int = 80
    sharpening_factor: float = 1.4
    # network
    embedding_dim: int = 32
    encoder_layers: int = 2
    encoder_conv_width: int = 5
    encoder_channels: int = 32
    decoder_affine_sizes: tuple = (64, 32)
    decoder_layers: int = 1
    decoder_conv_width: int = 5
    attention_hidden: int = 32
    position_weight: float = 1.0
    position_rate: float = 4.0
    converter_layers: int = 2
    converter_conv_width: int = 5
    converter_channels: int = 32
    dropout_keep: float = 0.95
    num_speakers: int = 1
    speaker_embedding_dim: int = 0
    # optimization
    learning_rate: float = 0.001
    anneal_rate: float = 0.0          # 0 disables annealing
    anneal_interval: int = 0
    batch_size: int = 8
    max_gradient_norm: float = 100.0
    gradient_clip_value: float = 5.0
    # gap-filling defaults
    mel_loss_weight: float = 1.0
    done_loss_weight: float = 1.0
    linear_loss_weight: float = 1.0
    voiced_loss_weight: float = 1.0
    f0_loss_weight: float = 1.0
    envelope_loss_weight: float = 1.0
    aperiodicity_loss_weight: float = 1.0
    done_threshold: float = 0.5
    griffin_lim_iterations: int = 60
    precision: str = "double"
    log_floor: float = 1e-5
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    phoneme_probability: float = 0.5
    attention_window: int = 3
    constrained_layers: tuple = (0, 2)
    max_steps_factor: float = 4.0
    checkpoint_interval: int = 500
    glu_init_gain: float = 1.7
    speaker_embedding_scale: float = 0.1
    mixed_inputs: bool = False
    world_head: bool = False
    world_envelope_dims: int = 16
    world_aperiodicity_dims: int = 4
    mel_fmin: float = 0.0
    mel_fmax: float = 0.0             # 0 means Nyquist

    def __post_init__(self):
        self.decoder_affine_sizes = tuple(self.decoder_affine_sizes)
        self.constrained_layers = tuple(self.constrained_layers)
        self.validate()

    def validate(self):
        if self.reduction_factor < 1:
            raise ValueError("reduction factor must be >= 1")
        for name in ("encoder_conv_width", "decoder_conv_width", "converter_conv_width"):
            if getattr(self, name) % 2 == 0:
                raise ValueError(f"{name} must be odd")
        if self.mel_bands <= 0:
            raise ValueError("mel_bands must be positive")
        if not self.decoder_affine_sizes:
            raise ValueError("need at least one decoder affine size")
        if self.decoder_affine_sizes[-1] != self.embedding_dim:
            raise ValueError(
                "last decoder affine size must equal the embedding dim so the "
                "query and key attention projections can share their init")
        if self.precision not in ("double", "single"):
            raise ValueError("precision must be 'double' or 'single'")
        if self.num_speakers > 1 and self.speaker_embedding_dim <= 0:
            raise ValueError("multi-speaker models need a speaker embedding dim")
        if not self.hop <= self.window_size <= self.fft_size:
            raise ValueError("need hop <= window_size <= fft_size")
        if not 0.0 < self.dropout_keep <= 1.0:
            raise ValueError("dropout keep probability must be in (0, 1]")

    # -- derived -----------------------------------------------------------

    @property
    def multi_speaker(self) -> bool:
        return self.num_speakers > 1

    @property
    def freq_bins(self) -> int:
        return self.fft_size // 2 + 1

    @property
    def anneal_enabled(self) -> bool:
        return self.anneal_rate > 0 and self.anneal_interval > 0

    def spectro(self):
        from .audio import SpectroConfig
        return SpectroConfig(
            sample_rate=self.sample_rate, fft_size=self.fft_size,
            window_size=self.window_size, hop=self.hop,
            mel_bands=self.mel_bands, fmin=self.mel_fmin,
            fmax=None if self.mel_fmax == 0 else self.mel_fmax,
            sharpening_factor=self.sharpening_factor)

    # -- presets -----------------------------------------------------------

    @classmethod
    def desk(cls, **overrides) -> "ModelConfig":
        """Desk-scale defaults (small, CPU-trainable)."""
        return cls(**overrides)

    @classmethod
    def tiny(cls, **overrides) -> "ModelConfig":
        """Minimal dims for gradient checks and fast unit tests."""
        base = dict(
            fft_size=16, window_size=16, hop=4, sample_rate=1600,
            mel_bands=5, reduction_factor=2,
            embedding_dim=8, encoder_layers=2, encoder_conv_width=3,
            encoder_channels=8, decoder_affine_sizes=(8, 8),
            decoder_layers=1, decoder_conv_width=3, attention_hidden=8,
            converter_layers=1, converter_conv_width=3, converter_channels=8,
            dropout_keep=1.0, position_rate=2.0, batch_size=2,
        )
        base.update(overrides)
        return cls(**base)

    @classmethod
    def full_single_speaker(cls, **overrides) -> "ModelConfig":
        """The published full-scale single-speaker operating point."""
        base = dict(
            fft_size=4096, window_size=2400, hop=600, sample_rate=48000,
            reduction_factor=4, mel_bands=80, sharpening_factor=1.4,
            embedding_dim=256, encoder_layers=7, encoder_conv_width=5,
            encoder_channels=64, decoder_affine_sizes=(128, 256),
            decoder_layers=4, decoder_conv_width=5, attention_hidden=128,
            position_weight=1.0, position_rate=6.3,
            converter_layers=5, converter_conv_width=5, converter_channels=256,
            dropout_keep=0.95, num_speakers=1, speaker_embedding_dim=0,
            learning_rate=0.001, anneal_rate=0.0, anneal_interval=0,
            batch_size=16, max_gradient_norm=100.0, gradient_clip_value=5.0,
        )
        base.update(overrides)
        return cls(**base)

    # -- serialization -------------------------------------------------------

    def to_text(self) -> str:
        lines = ["# convtts model configuration"]
        for key, getter, _ in _DOC_KEYS:
            lines.append(f"{key} = {getter(self)}")
        return "\n".join(lines) + "\n"

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_text())

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        cfg = cls.__new__(cls)
        for f in fields(cls):
            setattr(cfg, f.name, f.default)
        setters = {key: setter for key, _, setter in _DOC_KEYS}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            key, eq, value = line.partition("=")
            if not eq:
                raise ValueError(f"line {lineno}: expected 'Key = Value', got {raw!r}")
            key, value = key.strip(), value.strip()
            if key not in setters:
                raise ValueError(f"line {lineno}: unknown configuration key {key!r}")
            setters[key](cfg, value)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "ModelConfig":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_text(fh.read())

    def with_env_overrides(self, environ) -> "ModelConfig":
        """Apply CONVTTS_<KEY>=value overrides for every documented key."""
        cfg = replace(self)
        for key, _, setter in _DOC_KEYS:
            env_name = ENV_PREFIX + _env_name(key)
            if env_name in environ:
                setter(cfg, environ[env_name])
        cfg.validate()
        return cfg


def _env_name(key: str) -> str:
    return re.sub(r"_+", "_", re.sub(r"[^A-Za-z0-9]", "_", key)).strip("_").upper()


def _fmt_float(x: float) -> str:
    return repr(float(x))


def _pair(a, b, sep=" / "):
    return f"{a}{sep}{b}"


def _parse_pair(value, cast, sep="/"):
    parts = [p.strip() for p in value.split(sep)]
    if len(parts) != 2:
        raise ValueError(f"expected two values separated by {sep!r}: {value!r}")
    return cast(parts[0]), cast(parts[1])


def _parse_triple(value, sep="/"):
    parts = [p.strip() for p in value.split(sep)]
    if len(parts) != 3:
        raise ValueError(f"expected three values separated by {sep!r}: {value!r}")
    return tuple(int(p) for p in parts)


def _parse_bool(value):
    v = value.strip().lower()
    if v in ("on", "true", "yes", "1"):
        return True
    if v in ("off", "false", "no", "0"):
        return False
    raise ValueError(f"expected on/off, got {value!r}")


def _set(name, cast):
    def setter(cfg, value):
        setattr(cfg, name, cast(value))
    return setter


def _set_disabled_pair(name_a, name_b, cast_a, cast_b, off_a, off_b):
    def setter(cfg, value):
        if value.strip() == DISABLED:
            setattr(cfg, name_a, off_a)
            setattr(cfg, name_b, off_b)
        else:
            a, b = _parse_pair(value, str)
            setattr(cfg, name_a, cast_a(a))
            setattr(cfg, name_b, cast_b(b))
    return setter


def _int_tuple(value):
    value = value.strip()
    if not value:
        return ()
    return tuple(int(p.strip()) for p in value.split(","))


# (document key, formatter, parser).  The first group mirrors the published
# hyperparameter table row names exactly; the second group covers the knobs
# that table leaves open.
_DOC_KEYS = [
    ("FFT Size", lambda c: c.fft_size, _set("fft_size", int)),
    ("FFT Window Size / Shift", lambda c: _pair(c.window_size, c.hop),
     lambda c, v: (setattr(c, "window_size", _parse_pair(v, int)[0]),
                   setattr(c, "hop", _parse_pair(v, int)[1]))),
    ("Audio Sample Rate", lambda c: c.sample_rate, _set("sample_rate", int)),
    ("Reduction Factor r", lambda c: c.reduction_factor, _set("reduction_factor", int)),
    ("Mel Bands", lambda c: c.mel_bands, _set("mel_bands", int)),
    ("Sharpening Factor", lambda c: _fmt_float(c.sharpening_factor),
     _set("sharpening_factor", float)),
    ("Character Embedding Dim.", lambda c: c.embedding_dim, _set("embedding_dim", int)),
    ("Encoder Layers / Conv. Width / Channels",
     lambda c: f"{c.encoder_layers} / {c.encoder_conv_width} / {c.encoder_channels}",
     lambda c, v: _set_triple(c, v, "encoder_layers", "encoder_conv_width", "encoder_channels")),
    ("Decoder Affine Size",
     lambda c: ", ".join(str(s) for s in c.decoder_affine_sizes),
     lambda c, v: setattr(c, "decoder_affine_sizes", _int_tuple(v))),
    ("Decoder Layers / Conv. Width",
     lambda c: _pair(c.decoder_layers, c.decoder_conv_width),
     lambda c, v: (setattr(c, "decoder_layers", _parse_pair(v, int)[0]),
                   setattr(c, "decoder_conv_width", _parse_pair(v, int)[1]))),
    ("Attention Hidden Size", lambda c: c.attention_hidden, _set("attention_hidden", int)),
    ("Position Weight / Initial Rate",
     lambda c: _pair(_fmt_float(c.position_weight), _fmt_float(c.position_rate)),
     lambda c, v: (setattr(c, "position_weight", _parse_pair(v, float)[0]),
                   setattr(c, "position_rate", _parse_pair(v, float)[1]))),
    ("Converter Layers / Conv. Width / Channels",
     lambda c: f"{c.converter_layers} / {c.converter_conv_width} / {c.converter_channels}",
     lambda c, v: _set_triple(c, v, "converter_layers", "converter_conv_width", "converter_channels")),
    ("Dropout Keep Probability", lambda c: _fmt_float(c.dropout_keep),
     _set("dropout_keep", float)),
    ("Number of Speakers", lambda c: c.num_speakers, _set("num_speakers", int)),
    ("Speaker Embedding Dim.",
     lambda c: DISABLED if c.speaker_embedding_dim == 0 else c.speaker_embedding_dim,
     lambda c, v: setattr(c, "speaker_embedding_dim",
                          0 if v.strip() == DISABLED else int(v))),
    ("ADAM Learning Rate", lambda c: _fmt_float(c.learning_rate), _set("learning_rate", float)),
    ("Anneal Rate / Anneal Interval",
     lambda c: DISABLED if not c.anneal_enabled
     else _pair(_fmt_float(c.anneal_rate), c.anneal_interval),
     _set_disabled_pair("anneal_rate", "anneal_interval", float, int, 0.0, 0)),
    ("Batch Size", lambda c: c.batch_size, _set("batch_size", int)),
    ("Max Gradient Norm", lambda c: _fmt_float(c.max_gradient_norm),
     _set("max_gradient_norm", float)),
    ("Gradient Clipping Max. Value", lambda c: _fmt_float(c.gradient_clip_value),
     _set("gradient_clip_value", float)),
    # knobs the hyperparameter table leaves open
    ("Mel Loss Weight", lambda c: _fmt_float(c.mel_loss_weight), _set("mel_loss_weight", float)),
    ("Done Loss Weight", lambda c: _fmt_float(c.done_loss_weight), _set("done_loss_weight", float)),
    ("Linear Loss Weight", lambda c: _fmt_float(c.linear_loss_weight),
     _set("linear_loss_weight", float)),
    ("Voiced Loss Weight", lambda c: _fmt_float(c.voiced_loss_weight),
     _set("voiced_loss_weight", float)),
    ("F0 Loss Weight", lambda c: _fmt_float(c.f0_loss_weight), _set("f0_loss_weight", float)),
    ("Envelope Loss Weight", lambda c: _fmt_float(c.envelope_loss_weight),
     _set("envelope_loss_weight", float)),
    ("Aperiodicity Loss Weight", lambda c: _fmt_float(c.aperiodicity_loss_weight),
     _set("aperiodicity_loss_weight", float)),
    ("Done Threshold", lambda c: _fmt_float(c.done_threshold), _set("done_threshold", float)),
    ("Griffin-Lim Iterations", lambda c: c.griffin_lim_iterations,
     _set("griffin_lim_iterations", int)),
    ("Precision", lambda c: c.precision, _set("precision", str.strip)),
    ("Log Floor", lambda c: _fmt_float(c.log_floor), _set("log_floor", float)),
    ("ADAM Beta1", lambda c: _fmt_float(c.adam_beta1), _set("adam_beta1", float)),
    ("ADAM Beta2", lambda c: _fmt_float(c.adam_beta2), _set("adam_beta2", float)),
    ("ADAM Epsilon", lambda c: _fmt_float(c.adam_epsilon), _set("adam_epsilon", float)),
    ("Phoneme Probability", lambda c: _fmt_float(c.phoneme_probability),
     _set("phoneme_probability", float)),
    ("Attention Window Width", lambda c: c.attention_window, _set("attention_window", int)),
    ("Constrained Attention Layers",
     lambda c: ", ".join(str(i) for i in c.constrained_layers),
     lambda c, v: setattr(c, "constrained_layers", _int_tuple(v))),
    ("Max Steps Factor", lambda c: _fmt_float(c.max_steps_factor), _set("max_steps_factor", float)),
    ("Checkpoint Interval", lambda c: c.checkpoint_interval, _set("checkpoint_interval", int)),
    ("GLU Init Gain", lambda c: _fmt_float(c.glu_init_gain), _set("glu_init_gain", float)),
    ("Speaker Embedding Init Scale", lambda c: _fmt_float(c.speaker_embedding_scale),
     _set("speaker_embedding_scale", float)),
    ("Mixed Inputs", lambda c: "on" if c.mixed_inputs else "off",
     lambda c, v: setattr(c, "mixed_inputs", _parse_bool(v))),
    ("WORLD Head", lambda c: "on" if c.world_head else "off",
     lambda c, v: setattr(c, "world_head", _parse_bool(v))),
    ("WORLD Envelope Dims", lambda c: c.world_envelope_dims, _set("world_envelope_dims", int)),
    ("WORLD Aperiodicity Dims", lambda c: c.world_aperiodicity_dims,
     _set("world_aperiodicity_dims", int)),
    ("Mel Fmin", lambda c: _fmt_float(c.mel_fmin), _set("mel_fmin", float)),
    ("Mel Fmax", lambda c: _fmt_float(c.mel_fmax), _set("mel_fmax", float)),
]


def _set_triple(cfg, value, a, b, c):
    va, vb, vc = _parse_triple(value)
    setattr(cfg, a, va)
    setattr(cfg, b, vb)
    setattr(cfg, c, vc)


def env_key_names():
    """Documented key -> environment variable name map."""
    return {key: ENV_PREFIX + _env_name(key) for key, _, _ in _DOC_KEYS}
