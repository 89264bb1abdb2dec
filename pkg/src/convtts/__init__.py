"""Fully-convolutional attention-based text-to-speech, desk scale.

Text frontend -> encoder/decoder/converter networks with position-augmented
attention -> Griffin-Lim synthesis, plus a fused autoregressive inference
engine and a concurrent-stream throughput harness.
"""

from .audio import SpectroConfig, Waveform, griffin_lim, istft, stft
from .blocks import AttentionBlock, AttentionRecord, ConvBlock, positional_encoding
from .config import ModelConfig
from .corpus import ToySpec, make_toy_corpus
from .infer import DecodingStream, InferenceEngine, SynthResult, synthesize
from .model import Model, total_loss
from .tensor import Tensor, no_grad
from .text import PhonemeDict, SymbolSequence, SymbolTable, encode_mixed, normalize_text
from .train import Adam, Trainer, clip_gradients, prepare_dataset

__version__ = "0.1.0"

__all__ = [
    "Adam", "AttentionBlock", "AttentionRecord", "ConvBlock", "DecodingStream",
    "InferenceEngine", "Model", "ModelConfig", "PhonemeDict", "SpectroConfig",
    "SymbolSequence", "SymbolTable", "SynthResult", "Tensor", "ToySpec",
    "Trainer", "Waveform", "clip_gradients", "encode_mixed", "griffin_lim",
    "istft", "make_toy_corpus", "no_grad", "normalize_text",
    "positional_encoding", "prepare_dataset", "stft", "synthesize",
    "total_loss",
]
