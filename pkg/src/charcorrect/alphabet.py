"""The 37-class character alphabet: digits, lowercase letters, and the empty class.

Index layout: ``0-9`` -> 0..9, ``a-z`` -> 10..35, empty -> 36. The empty class
marks "no character here" and is rendered as the empty string.
"""

from __future__ import annotations

import numpy as np

SYMBOLS = "0123456789abcdefghijklmnopqrstuvwxyz"
EMPTY = len(SYMBOLS)
N_CLASSES = EMPTY + 1
FRAME_LENGTH = 23

_INDEX = {ch: i for i, ch in enumerate(SYMBOLS)}


def char_index(ch: str) -> int:
    try:
        return _INDEX[ch]
    except KeyError:
        raise ValueError(f"symbol {ch!r} is not in the alphabet [0-9a-z]") from None


def index_char(i: int) -> str:
    if i == EMPTY:
        return ""
    if not 0 <= i < EMPTY:
        raise ValueError(f"class index {i} out of range")
    return SYMBOLS[i]


def normalize_word(word: str) -> str:
    """Lowercase and validate; raises ValueError on symbols outside the alphabet."""
    word = word.strip().lower()
    for ch in word:
        char_index(ch)
    return word


def word_indices(word: str) -> list[int]:
    return [char_index(ch) for ch in word]


def indices_word(indices) -> str:
    """Concatenate non-empty symbols in order (interior empties are dropped)."""
    return "".join(SYMBOLS[i] for i in np.asarray(indices).tolist() if i != EMPTY)


def one_hot_rows(symbols, frame_length: int = FRAME_LENGTH) -> np.ndarray:
    """Right-justify a word or symbol-index sequence into ``frame_length`` one-hot rows."""
    symbols = word_indices(symbols) if isinstance(symbols, str) else list(symbols)
    if len(symbols) > frame_length:
        raise ValueError(f"{len(symbols)} symbols do not fit in {frame_length} rows")
    rows = np.zeros((frame_length, N_CLASSES))
    pad = frame_length - len(symbols)
    rows[:pad, EMPTY] = 1.0
    rows[np.arange(pad, frame_length), symbols] = 1.0
    return rows
