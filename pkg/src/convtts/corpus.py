"""Synthetic desk-scale corpus with known alignments, plus corpus file I/O.

Each symbol of a small alphabet renders to a fixed-duration harmonic stack
(separators and end marks render as silence), so every utterance comes with
an exact symbol-to-frame alignment.  The multi-speaker variant shifts the
per-speaker fundamental, with speakers split into a low and a high pitch
group.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .audio import SpectroConfig, Waveform, frame_count, log_magnitude, \
    magnitude_frames, mel_spectrogram, read_wav, write_wav
from .text import normalize_text


@dataclass(frozen=True)
class ToySpec:
    """Parameters of the synthetic corpus."""

    alphabet_size: int = 8
    utterances: int = 200
    min_symbols: int = 4
    max_symbols: int = 10
    symbol_duration: float = 0.05    # seconds per symbol; 4 frames at 16k/200
    base_f0: float = 220.0
    amplitude: float = 0.45
    speakers: int = 1
    high_group_factor: float = 2.2   # pitch ratio of the high speaker group

    def __post_init__(self):
        if not 1 <= self.alphabet_size <= 26:
            raise ValueError("alphabet_size must be in [1, 26]")
        if self.min_symbols < 1 or self.max_symbols < self.min_symbols:
            raise ValueError("bad symbol count range")

    @property
    def alphabet(self):
        return [chr(ord("A") + i) for i in range(self.alphabet_size)]

    def speaker_f0(self, speaker: int) -> float:
        """Low group: speakers [0, n/2); high group: the rest."""
        half = max(1, self.speakers // 2)
        group_base = self.base_f0 if speaker < half else self.base_f0 * self.high_group_factor
        return group_base * (1.0 + 0.04 * (speaker % half))

    def speaker_groups(self):
        half = max(1, self.speakers // 2)
        return [0 if s < half else 1 for s in range(self.speakers)]


@dataclass(frozen=True)
class UtteranceEntry:
    speaker_id: int
    text: str
    audio_path: str


def _render_symbol(symbol: str, spec: ToySpec, cfg: SpectroConfig, f0: float):
    n = int(round(spec.symbol_duration * cfg.sample_rate))
    if symbol not in spec.alphabet:
        return np.zeros(n)  # separators, end marks, pauses: silence
    j = spec.alphabet.index(symbol)
    t = np.arange(n) / cfg.sample_rate
    freq = f0 * (1.0 + 0.21 * j)
    x = np.zeros(n)
    for harmonic, amp in ((1, 1.0), (2, 0.5), (3, 0.25)):
        x += amp * np.sin(2.0 * np.pi * freq * harmonic * t)
    x *= spec.amplitude / 1.75
    fade = max(1, int(0.005 * cfg.sample_rate))
    ramp = np.linspace(0.0, 1.0, fade)
    x[:fade] *= ramp
    x[-fade:] *= ramp[::-1]
    return x


def render_utterance(normalized: str, speaker: int, spec: ToySpec,
                     cfg: SpectroConfig):
    """Render normalized text to audio plus the ground-truth alignment.

    Returns (Waveform, alignment) where alignment rows are
    (symbol_index, start_frame, end_frame) and frames advance by cfg.hop.
    """
    fps = frames_per_symbol(spec, cfg)
    f0 = spec.speaker_f0(speaker)
    segments = [_render_symbol(ch, spec, cfg, f0) for ch in normalized]
    samples = np.concatenate(segments)
    alignment = [(i, i * fps, (i + 1) * fps) for i in range(len(normalized))]
    return Waveform(samples, cfg.sample_rate), alignment


def frames_per_symbol(spec: ToySpec, cfg: SpectroConfig) -> int:
    n = spec.symbol_duration * cfg.sample_rate
    fps = n / cfg.hop
    if abs(fps - round(fps)) > 1e-9:
        raise ValueError("symbol duration must be a whole number of hops")
    return int(round(fps))


def _random_text(spec: ToySpec, rng) -> str:
    n = int(rng.integers(spec.min_symbols, spec.max_symbols + 1))
    symbols = [spec.alphabet[int(i)] for i in rng.integers(0, spec.alphabet_size, n)]
    # group into words of 1..3 symbols so separators appear in the corpus
    words = []
    i = 0
    while i < n:
        w = int(rng.integers(1, 4))
        words.append("".join(symbols[i : i + w]))
        i += w
    return " ".join(words) + "."


def make_toy_corpus(out_dir, spec: ToySpec, cfg: SpectroConfig, seed=0) -> Path:
    """Write wavs, alignments, a manifest, and corpus metadata; returns out_dir."""
    out = Path(out_dir)
    (out / "wav").mkdir(parents=True, exist_ok=True)
    (out / "align").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    rows = []
    for u in range(spec.utterances):
        speaker = u % spec.speakers
        text = _random_text(spec, rng)
        normalized = normalize_text(text)
        wave, alignment = render_utterance(normalized, speaker, spec, cfg)
        wav_path = out / "wav" / f"utt_{u:04d}.wav"
        write_wav(wav_path, wave)
        with open(out / "align" / f"utt_{u:04d}.csv", "w", newline="",
                  encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["symbol_index", "start_frame", "end_frame"])
            w.writerows(alignment)
        rows.append(f"{speaker}\t{text}\t{wav_path.name}")
    (out / "manifest.tsv").write_text("\n".join(rows) + "\n", encoding="utf-8")
    meta = {
        "alphabet_size": spec.alphabet_size,
        "utterances": spec.utterances,
        "speakers": spec.speakers,
        "frames_per_symbol": frames_per_symbol(spec, cfg),
        "speaker_groups": spec.speaker_groups(),
        "symbol_duration": spec.symbol_duration,
        "seed": seed,
    }
    (out / "corpus.json").write_text(json.dumps(meta, indent=2), encoding="utf-8")
    return out


def read_manifest(corpus_dir) -> list:
    corpus_dir = Path(corpus_dir)
    entries = []
    text = (corpus_dir / "manifest.tsv").read_text(encoding="utf-8")
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise ValueError(f"manifest line {lineno}: expected "
                             f"speaker<TAB>text<TAB>audio, got {line!r}")
        entries.append(UtteranceEntry(int(parts[0]), parts[1], parts[2]))
    return entries


def read_alignment(path) -> np.ndarray:
    """Alignment CSV -> int array of (symbol_index, start_frame, end_frame)."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[:3] != ["symbol_index", "start_frame", "end_frame"]:
            raise ValueError(f"unexpected alignment header: {header}")
        rows = [[int(v) for v in row] for row in reader]
    aln = np.asarray(rows, dtype=np.int64)
    if np.any(np.diff(aln[:, 1]) <= 0) and len(aln) > 1:
        raise ValueError("alignment start frames must be strictly increasing")
    return aln


def utterance_features(corpus_dir, entry: UtteranceEntry, cfg: SpectroConfig,
                       floor: float = 1e-5):
    """Load audio and compute (log-mel, log-linear, n_frames) for one utterance."""
    wave = read_wav(Path(corpus_dir) / "wav" / entry.audio_path)
    mag = magnitude_frames(wave.samples, cfg)
    mel = mel_spectrogram(mag, cfg, floor=floor)
    linear = log_magnitude(mag, floor=floor)
    return mel, linear, len(mag)


def dataset_position_ratio(corpus_dir, entries, cfg: SpectroConfig,
                           encoded_lengths) -> float:
    """Ratio of output frames to input symbols across the dataset."""
    total_frames = 0
    total_symbols = 0
    for entry, n_sym in zip(entries, encoded_lengths):
        wave = read_wav(Path(corpus_dir) / "wav" / entry.audio_path)
        total_frames += frame_count(len(wave.samples), cfg)
        total_symbols += n_sym
    return total_frames / total_symbols
