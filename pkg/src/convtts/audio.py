"""Spectrogram analysis and synthesis: STFT, mel filterbank, Griffin-Lim.

All functions here are pure numpy; they prepare training targets and turn
predicted spectrograms back into waveforms.
"""

from __future__ import annotations

import wave as _wave
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class SpectroConfig:
    """Frame analysis parameters.

    The defaults are the desk-scale operating point; full-scale values
    (fft 4096, window 2400, hop 600, 48 kHz) remain selectable.
    """

    sample_rate: int = 16000
    fft_size: int = 1024
    window_size: int = 800
    hop: int = 200
    mel_bands: int = 80
    fmin: float = 0.0
    fmax: float | None = None
    sharpening_factor: float = 1.4

    def __post_init__(self):
        if not (self.hop <= self.window_size <= self.fft_size):
            raise ValueError("need hop <= window_size <= fft_size")
        if not (0 < self.mel_bands < self.fft_size // 2 + 1):
            raise ValueError("mel_bands must be positive and below fft_size/2+1")

    @property
    def freq_bins(self) -> int:
        return self.fft_size // 2 + 1

    @property
    def nyquist(self) -> float:
        return self.sample_rate / 2.0


@dataclass(frozen=True)
class Waveform:
    """Mono audio samples in [-1, 1]."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        if self.samples.size == 0:
            raise ValueError("empty waveform")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("waveform contains non-finite samples")
        peak = np.abs(self.samples).max()
        if peak > 1.0 + 1e-9:
            raise ValueError(f"samples exceed [-1, 1] (peak {peak:.4f}); normalize first")

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


def _hann(n):
    # Periodic Hann; satisfies constant overlap-add for hop <= n/2.
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def stft(samples: np.ndarray, cfg: SpectroConfig) -> np.ndarray:
    """Complex spectrogram, shape (frames, fft_size/2+1).

    Frames are centered: the signal is padded with window_size/2 zeros on
    each side, so frame t is centered at sample t*hop.
    """
    x = np.asarray(samples, dtype=np.float64)
    if x.size < cfg.window_size:
        raise ValueError(
            f"signal of {x.size} samples is shorter than one window ({cfg.window_size})"
        )
    w = cfg.window_size
    pad = w // 2
    xp = np.pad(x, (pad, pad))
    n_frames = 1 + (xp.size - w) // cfg.hop
    window = _hann(w)
    frames = np.zeros((n_frames, cfg.fft_size))
    for t in range(n_frames):
        frames[t, :w] = xp[t * cfg.hop : t * cfg.hop + w] * window
    return np.fft.rfft(frames, axis=-1)


def istft(spec: np.ndarray, cfg: SpectroConfig, length: int | None = None) -> np.ndarray:
    """Inverse STFT by overlap-add with squared-window normalization."""
    n_frames = spec.shape[0]
    w = cfg.window_size
    pad = w // 2
    window = _hann(w)
    total = (n_frames - 1) * cfg.hop + w
    acc = np.zeros(total)
    wsum = np.zeros(total)
    frames = np.fft.irfft(spec, n=cfg.fft_size, axis=-1)[:, :w]
    for t in range(n_frames):
        sl = slice(t * cfg.hop, t * cfg.hop + w)
        acc[sl] += frames[t] * window
        wsum[sl] += window * window
    good = wsum > 1e-10
    acc[good] /= wsum[good]
    out = acc[pad : total - pad]
    if length is not None:
        out = out[:length]
    return out


def frame_count(n_samples: int, cfg: SpectroConfig) -> int:
    """Number of whole-hop frames kept for training targets.

    Truncates the trailing partial frame of the centered STFT so frame
    counts are exactly n_samples // hop (keeps dataset timing ratios exact).
    """
    return n_samples // cfg.hop


def magnitude_frames(samples: np.ndarray, cfg: SpectroConfig) -> np.ndarray:
    """|STFT| truncated to frame_count() frames, shape (T, F)."""
    mag = np.abs(stft(samples, cfg))
    return mag[: frame_count(len(samples), cfg)]


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filter_matrix(cfg: SpectroConfig) -> np.ndarray:
    """Area-normalized triangular filters on the mel scale, shape (mel_bands, F)."""
    fmax = cfg.nyquist if cfg.fmax is None else cfg.fmax
    mel_pts = np.linspace(_hz_to_mel(cfg.fmin), _hz_to_mel(fmax), cfg.mel_bands + 2)
    hz_pts = _mel_to_hz(mel_pts)
    bin_freqs = np.arange(cfg.freq_bins) * cfg.sample_rate / cfg.fft_size
    fb = np.zeros((cfg.mel_bands, cfg.freq_bins))
    for m in range(cfg.mel_bands):
        lo, mid, hi = hz_pts[m], hz_pts[m + 1], hz_pts[m + 2]
        up = (bin_freqs - lo) / (mid - lo)
        down = (hi - bin_freqs) / (hi - mid)
        fb[m] = np.maximum(0.0, np.minimum(up, down))
        fb[m] *= 2.0 / (hi - lo)  # area normalization
    return fb


def mel_spectrogram(linear_mag: np.ndarray, cfg: SpectroConfig,
                    floor: float = 1e-5) -> np.ndarray:
    """Log mel-band spectrogram from linear magnitudes, shape (T, mel_bands)."""
    mel = linear_mag @ mel_filter_matrix(cfg).T
    return np.log(np.maximum(mel, floor))


def log_magnitude(linear_mag: np.ndarray, floor: float = 1e-5) -> np.ndarray:
    return np.log(np.maximum(linear_mag, floor))


def spectral_convergence(mag: np.ndarray, target_mag: np.ndarray) -> float:
    return float(np.linalg.norm(mag - target_mag) / np.linalg.norm(target_mag))


def griffin_lim(linear_log_mag: np.ndarray, cfg: SpectroConfig,
                iterations: int = 60, seed: int = 0,
                track_convergence: bool = False):
    """Waveform from a linear-scale log-magnitude spectrogram.

    The magnitude is recovered by exp, raised to the sharpening power, then
    phases are estimated iteratively (analysis/synthesis with the target
    magnitude restored each round).  Initial phase is uniform in [-pi, pi)
    drawn from the seed.
    """
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    if not np.all(np.isfinite(linear_log_mag)):
        raise ValueError("non-finite values in log-magnitude input")
    mag = np.exp(np.asarray(linear_log_mag, dtype=np.float64))
    mag = mag ** cfg.sharpening_factor
    rng = np.random.default_rng(seed)
    phase = rng.uniform(-np.pi, np.pi, size=mag.shape)
    spec = mag * np.exp(1j * phase)
    errors = []
    for _ in range(iterations):
        x = istft(spec, cfg)
        if x.size < cfg.window_size:
            x = np.pad(x, (0, cfg.window_size - x.size))
        est = stft(x, cfg)[: mag.shape[0]]
        if track_convergence:
            errors.append(spectral_convergence(np.abs(est), mag))
        est_phase = np.where(np.abs(est) > 0, est / np.maximum(np.abs(est), 1e-16), 1.0)
        spec = mag * est_phase
    x = istft(spec, cfg)
    peak = np.abs(x).max()
    if peak > 1.0:
        x = x / peak
    wave = Waveform(x, cfg.sample_rate)
    if track_convergence:
        return wave, errors
    return wave


def write_wav(path, wave: Waveform):
    """16-bit PCM mono; peak-normalizes only if the peak exceeds 1."""
    x = wave.samples
    peak = np.abs(x).max()
    if peak > 1.0:
        x = x / peak
    pcm = np.clip(np.round(x * 32767.0), -32768, 32767).astype("<i2")
    with _wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(wave.sample_rate)
        fh.writeframes(pcm.tobytes())


def read_wav(path) -> Waveform:
    with _wave.open(str(path), "rb") as fh:
        if fh.getnchannels() != 1 or fh.getsampwidth() != 2:
            raise ValueError("expected 16-bit mono PCM")
        rate = fh.getframerate()
        raw = fh.readframes(fh.getnframes())
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32767.0
    return Waveform(np.clip(samples, -1.0, 1.0), rate)
