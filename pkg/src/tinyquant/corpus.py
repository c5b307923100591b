"""Byte-level corpus handling: tokenization, pinned slices, fingerprints.

The corpus format is plain UTF-8 text; tokens are the raw bytes (vocabulary of
256).  Evaluation and calibration use pinned contiguous windows so every
metric is reproducible from the corpus file alone.
"""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path

import numpy as np

WINDOW_LEN = 129  # 128 next-token predictions per window
CALIBRATION_WINDOWS = 64
VALIDATION_WINDOWS = 32


def tokenize_bytes(data: bytes) -> np.ndarray:
    return np.frombuffer(data, dtype=np.uint8).astype(np.int32)


def tokenize_text(text: str) -> np.ndarray:
    return tokenize_bytes(text.encode("utf-8"))


def detokenize(tokens: np.ndarray) -> str:
    return bytes(int(t) & 0xFF for t in np.asarray(tokens)).decode(
        "utf-8", errors="replace"
    )


def load_corpus(path: str | Path) -> np.ndarray:
    return tokenize_bytes(Path(path).read_bytes())


def windows(tokens: np.ndarray, length: int = WINDOW_LEN, count: int | None = None,
            offset: int = 0) -> list[np.ndarray]:
    """Contiguous non-overlapping windows of ``length`` tokens."""
    out = []
    pos = offset
    while pos + length <= len(tokens):
        out.append(np.ascontiguousarray(tokens[pos:pos + length]))
        pos += length
        if count is not None and len(out) >= count:
            break
    if count is not None and len(out) < count:
        raise ValueError(
            f"corpus too small: wanted {count} windows of {length}, got {len(out)}"
        )
    return out


def calibration_slice(tokens: np.ndarray) -> list[np.ndarray]:
    """The pinned 64-window calibration slice (front of the corpus)."""
    return windows(tokens, WINDOW_LEN, CALIBRATION_WINDOWS)


def validation_slice(tokens: np.ndarray) -> list[np.ndarray]:
    """The pinned 32-window validation slice, after the calibration slice."""
    return windows(tokens, WINDOW_LEN, VALIDATION_WINDOWS,
                   offset=WINDOW_LEN * CALIBRATION_WINDOWS)


def fingerprint(sequences: list[np.ndarray]) -> str:
    """Content hash of a tokenized slice, embedded in every report."""
    h = hashlib.sha256()
    for seq in sequences:
        arr = np.ascontiguousarray(np.asarray(seq, dtype=np.int32))
        h.update(struct.pack("<Q", arr.size))
        h.update(arr.tobytes())
    return h.hexdigest()


def sample_prompts(
    tokens: np.ndarray,
    count: int,
    rng: np.random.Generator,
    min_len: int = 4,
    max_len: int = 12,
) -> list[np.ndarray]:
    """Random short prompts drawn from corpus positions (decoding experiments)."""
    prompts = []
    for _ in range(count):
        plen = int(rng.integers(min_len, max_len + 1))
        start = int(rng.integers(0, len(tokens) - plen))
        prompts.append(np.ascontiguousarray(tokens[start:start + plen]))
    return prompts
