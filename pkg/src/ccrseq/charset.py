"""Character set and token indices shared by every module."""

from __future__ import annotations

import string
from typing import Iterable, Sequence

CHARACTERS = string.ascii_lowercase + string.digits
NUM_CHARS = len(CHARACTERS)

# special tokens are appended after the character indices
EOS = NUM_CHARS
BOS = NUM_CHARS + 1
PAD = NUM_CHARS + 2

NUM_CLASSES = NUM_CHARS + 1  # output vocabulary: characters + EOS
NUM_INPUT_TOKENS = NUM_CHARS + 3  # decoder input vocabulary adds BOS and PAD

MAX_LABEL_LEN = 12
MAX_DECODE_LEN = MAX_LABEL_LEN + 1

_CHAR_TO_INDEX = {c: i for i, c in enumerate(CHARACTERS)}


class InvalidCharacterError(ValueError):
    def __init__(self, symbol: str, text: str):
        super().__init__(f"character {symbol!r} in {text!r} is not in the charset")
        self.symbol = symbol
        self.text = text


def validate_text(text: str) -> None:
    if not text:
        raise ValueError("text must be non-empty")
    if len(text) > MAX_LABEL_LEN:
        raise ValueError(f"text {text!r} longer than {MAX_LABEL_LEN} characters")
    for c in text:
        if c not in _CHAR_TO_INDEX:
            raise InvalidCharacterError(c, text)


def encode(text: str) -> list[int]:
    """Character indices of ``text`` followed by EOS."""
    validate_text(text)
    return [_CHAR_TO_INDEX[c] for c in text] + [EOS]


def decode(tokens: Iterable[int]) -> str:
    out = []
    for t in tokens:
        t = int(t)
        if t == EOS:
            break
        if 0 <= t < NUM_CHARS:
            out.append(CHARACTERS[t])
    return "".join(out)


def normalize_label(text: str) -> str:
    """Lowercase and drop anything outside the alphanumeric charset."""
    return "".join(c for c in text.lower() if c in _CHAR_TO_INDEX)


def pad_batch(seqs: Sequence[Sequence[int]], length: int | None = None) -> list[list[int]]:
    length = length if length is not None else max((len(s) for s in seqs), default=0)
    return [list(s) + [PAD] * (length - len(s)) for s in seqs]
