"""Text frontend: normalization, symbol tables, and mixed char/phoneme encoding.

Input text is uppercased, stripped of intermediate punctuation, and closed
with a period or question mark.  Spaces become the standard word separator;
``%`` and ``/`` mark long and short pauses, and ``+`` is reserved for
slurred-together words.  Words can be swapped for their phoneme spellings
with a configurable probability, which is resampled every training
iteration.
"""

from __future__ import annotations

import re
import unicodedata
from dataclasses import dataclass, field

import numpy as np

PAD = "<pad>"
SEPARATORS = (" ", "/", "%", "+")  # standard, short pause, long pause, slurred
END_MARKS = (".", "?")

_CHARACTERS = tuple("ABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789")

# ARPAbet as used by CMUdict 0.6b: vowels carry stress digits 0/1/2.
_VOWELS = ("AA", "AE", "AH", "AO", "AW", "AY", "EH", "ER", "EY",
           "IH", "IY", "OW", "OY", "UH", "UW")
_CONSONANTS = ("B", "CH", "D", "DH", "F", "G", "HH", "JH", "K", "L", "M",
               "N", "NG", "P", "R", "S", "SH", "T", "TH", "V", "W", "Y",
               "Z", "ZH")
ARPABET = tuple(v + s for v in _VOWELS for s in ("0", "1", "2")) + _CONSONANTS

# Phoneme symbols are namespaced with '@' so the phoneme AA1 and the
# character sequence A,A,1 can never collide in the table.
PHONEME_PREFIX = "@"

_SEP_SPACING = re.compile(r"\s*([/%+])\s*")
_WS = re.compile(r"\s+")


class TextError(ValueError):
    """Raised for text that cannot be normalized or encoded."""


def normalize_text(raw: str) -> str:
    """Normalize raw annotated text for encoding.

    Uppercases, removes intermediate punctuation, ends the utterance with a
    period or question mark (terminal ``!`` maps to ``.``), collapses
    whitespace to the standard separator, and preserves the pause
    annotations ``%``, ``/`` and ``+``.  Idempotent.
    """
    s = raw.upper().strip()
    if s and s[-1] in ".?!":
        terminal = "?" if s[-1] == "?" else "."
        s = s[:-1]
    else:
        terminal = "."
    kept = []
    for ch in s:
        if unicodedata.category(ch).startswith("P") and ch not in SEPARATORS:
            continue
        kept.append(ch)
    s = _WS.sub(" ", "".join(kept)).strip()
    s = _SEP_SPACING.sub(r"\1", s)
    if not s:
        raise TextError(f"text is empty after normalization: {raw!r}")
    return s + terminal


@dataclass(frozen=True)
class SymbolTable:
    """Ordered inventory of encodable symbols.

    Index 0 is the padding symbol; the four separators and both end marks
    are always present.
    """

    symbols: tuple
    id_of: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.symbols[0] != PAD:
            raise ValueError("padding symbol must sit at index 0")
        if len(set(self.symbols)) != len(self.symbols):
            raise ValueError("duplicate symbols in table")
        for sep in SEPARATORS:
            if sep not in self.symbols:
                raise ValueError(f"separator {sep!r} missing from table")
        object.__setattr__(self, "id_of", {s: i for i, s in enumerate(self.symbols)})

    def __len__(self):
        return len(self.symbols)

    @classmethod
    def characters_only(cls) -> "SymbolTable":
        return cls((PAD,) + SEPARATORS + END_MARKS + _CHARACTERS)

    @classmethod
    def with_phonemes(cls) -> "SymbolTable":
        phones = tuple(PHONEME_PREFIX + p for p in ARPABET)
        return cls((PAD,) + SEPARATORS + END_MARKS + _CHARACTERS + phones)

    def encode_symbol(self, symbol: str) -> int:
        try:
            return self.id_of[symbol]
        except KeyError:
            raise TextError(f"symbol {symbol!r} is not in the symbol table") from None

    def decode(self, ids) -> str:
        """Inverse of character-level encoding; phoneme ids keep their '@' form."""
        return "".join(self.symbols[i] for i in ids if i != 0)


@dataclass(frozen=True)
class SymbolSequence:
    """Encoded utterance: symbol ids plus speaker id and the source text."""

    ids: tuple
    speaker_id: int
    source_text: str

    def __post_init__(self):
        if len(self.ids) == 0:
            raise ValueError("empty symbol sequence")
        if self.speaker_id < 0:
            raise ValueError("speaker_id must be >= 0")

    def __len__(self):
        return len(self.ids)


class PhonemeDict:
    """Word -> phoneme list map in the CMUdict 0.6b text format.

    Alternative pronunciations carry a ``(n)`` suffix; only the first
    variant of each word is kept.
    """

    def __init__(self, entries: dict):
        self.entries = entries

    def __contains__(self, word):
        return word in self.entries

    def __getitem__(self, word):
        return self.entries[word]

    def __len__(self):
        return len(self.entries)

    @classmethod
    def parse(cls, text: str) -> "PhonemeDict":
        entries = {}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith(";;;"):
                continue
            head, _, tail = line.partition("  ")
            if not tail:
                continue
            word = head.strip().upper()
            if word.endswith(")") and "(" in word:
                continue  # (2), (3)... variants; first spelling wins
            entries.setdefault(word, tuple(tail.split()))
        return cls(entries)

    @classmethod
    def load(cls, path) -> "PhonemeDict":
        with open(path, "r", encoding="latin-1") as fh:
            return cls.parse(fh.read())


def _tokenize(normalized: str):
    """Split normalized text into word / separator / end-mark tokens."""
    tokens = []
    word = []
    for ch in normalized:
        if ch in SEPARATORS or ch in END_MARKS:
            if word:
                tokens.append(("word", "".join(word)))
                word = []
            kind = "sep" if ch in SEPARATORS else "end"
            tokens.append((kind, ch))
        else:
            word.append(ch)
    if word:
        tokens.append(("word", "".join(word)))
    return tokens


def encode_mixed(normalized: str, dictionary, table: SymbolTable,
                 phoneme_prob: float, rng_seed) -> SymbolSequence:
    """Encode normalized text, swapping in-dictionary words for phonemes.

    Each in-dictionary word is independently replaced with probability
    ``phoneme_prob``; out-of-vocabulary words stay character-encoded.
    Deterministic for a fixed seed.
    """
    if not 0.0 <= phoneme_prob <= 1.0:
        raise ValueError(f"phoneme_prob must be a probability, got {phoneme_prob}")
    rng = np.random.default_rng(rng_seed)
    ids = []
    for kind, tok in _tokenize(normalized):
        if kind != "word":
            ids.append(table.encode_symbol(tok))
            continue
        use_phonemes = (
            phoneme_prob > 0.0
            and dictionary is not None
            and tok in dictionary
            and rng.random() < phoneme_prob
        )
        if use_phonemes:
            ids.extend(table.encode_symbol(PHONEME_PREFIX + p) for p in dictionary[tok])
        else:
            ids.extend(table.encode_symbol(ch) for ch in tok)
    seq = SymbolSequence(tuple(ids), 0, normalized)
    _check_terminated(seq, table)
    return seq


def encode_characters(normalized: str, table: SymbolTable,
                      speaker_id: int = 0) -> SymbolSequence:
    """Pure character encoding (the phoneme_prob=0 path)."""
    seq = encode_mixed(normalized, None, table, 0.0, 0)
    return SymbolSequence(seq.ids, speaker_id, seq.source_text)


def encode_utterance(text: str, table: SymbolTable, speaker_id: int = 0,
                     dictionary=None, phoneme_prob: float = 0.0,
                     rng_seed=0) -> SymbolSequence:
    """normalize_text + encode_mixed with a speaker id attached."""
    seq = encode_mixed(normalize_text(text), dictionary, table, phoneme_prob, rng_seed)
    return SymbolSequence(seq.ids, speaker_id, seq.source_text)


def _check_terminated(seq: SymbolSequence, table: SymbolTable):
    last = next((i for i in reversed(seq.ids) if i != 0), None)
    if last is None or table.symbols[last] not in END_MARKS:
        raise TextError("sequence must end with a period or question mark")
