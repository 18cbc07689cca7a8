"""CAN-ID vocabulary and fixed-length sliding windows over token streams."""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .canio import CanFrame, Label

SUPPORTED_T = (16, 32, 64, 128, 256)


@dataclass(frozen=True)
class IdVocabulary:
    """Bijection between the M observed CAN ids and tokens 0..M-1.

    Token M is MASK and token M+1 is UNK.
    """

    ids: tuple[int, ...]

    def __post_init__(self):
        if len(set(self.ids)) != len(self.ids):
            raise ValueError("duplicate ids in vocabulary")
        object.__setattr__(self, "_index", {cid: k for k, cid in enumerate(self.ids)})

    @property
    def M(self) -> int:
        return len(self.ids)

    @property
    def mask_token(self) -> int:
        return self.M

    @property
    def unk_token(self) -> int:
        return self.M + 1

    @property
    def total_tokens(self) -> int:
        return self.M + 2

    @property
    def id_to_token(self) -> dict[int, int]:
        return dict(self._index)

    @property
    def token_to_id(self) -> dict[int, int]:
        return dict(enumerate(self.ids))

    def token(self, can_id: int) -> int:
        return self._index.get(can_id, self.unk_token)

    def encode(self, ids) -> np.ndarray:
        return np.fromiter((self._index.get(int(c), self.unk_token) for c in ids),
                           dtype=np.int64)

    def decode(self, tokens) -> list[int | None]:
        return [self.ids[t] if 0 <= t < self.M else None for t in tokens]

    def to_json(self) -> str:
        return json.dumps({f"0x{cid:X}": k for k, cid in enumerate(self.ids)}, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "IdVocabulary":
        raw = json.loads(text)
        pairs = sorted((tok, int(hex_id, 16)) for hex_id, tok in raw.items())
        if [t for t, _ in pairs] != list(range(len(pairs))):
            raise ValueError("vocabulary tokens must be 0..M-1")
        return cls(tuple(cid for _, cid in pairs))

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()


def build_vocab(frames: Sequence[CanFrame]) -> IdVocabulary:
    ids = {f.can_id for f in frames}
    if not ids:
        raise ValueError("cannot build a vocabulary from an empty stream")
    return IdVocabulary(tuple(sorted(ids)))


def tokenize(frames: Sequence[CanFrame], vocab: IdVocabulary) -> tuple[np.ndarray, np.ndarray]:
    """Tokens and 0/1 attack labels, in transmission order."""
    tokens = vocab.encode(f.can_id for f in frames)
    labels = np.fromiter((f.label is Label.ATTACK for f in frames), dtype=np.uint8,
                         count=len(frames))
    return tokens, labels


@dataclass(frozen=True)
class Window:
    tokens: np.ndarray
    position_labels: np.ndarray
    origin: int = 0

    def __post_init__(self):
        if len(self.tokens) != len(self.position_labels):
            raise ValueError("tokens and labels differ in length")

    @property
    def sequence_label(self) -> int:
        return int(np.any(self.position_labels))

    @property
    def T(self) -> int:
        return len(self.tokens)


@dataclass
class WindowSet:
    """A stack of equal-length windows, stored as (N, T) arrays."""

    tokens: np.ndarray
    position_labels: np.ndarray
    origins: np.ndarray

    def __post_init__(self):
        self.tokens = np.ascontiguousarray(self.tokens, dtype=np.int64)
        self.position_labels = np.ascontiguousarray(self.position_labels, dtype=np.uint8)
        self.origins = np.asarray(self.origins, dtype=np.int64)
        if self.tokens.shape != self.position_labels.shape or self.tokens.ndim != 2:
            raise ValueError("tokens/labels must be matching (N, T) arrays")
        if self.origins.shape != (len(self.tokens),):
            raise ValueError("one origin per window")

    def __len__(self) -> int:
        return len(self.tokens)

    def __getitem__(self, idx):
        if isinstance(idx, (int, np.integer)):
            return Window(self.tokens[idx], self.position_labels[idx], int(self.origins[idx]))
        return WindowSet(self.tokens[idx], self.position_labels[idx], self.origins[idx])

    @property
    def T(self) -> int:
        return self.tokens.shape[1]

    @property
    def sequence_labels(self) -> np.ndarray:
        return self.position_labels.any(axis=1).astype(np.uint8)

    def contains_token(self, token: int) -> np.ndarray:
        return (self.tokens == token).any(axis=1)

    @classmethod
    def from_windows(cls, windows: Sequence[Window]) -> "WindowSet":
        return cls(np.stack([w.tokens for w in windows]),
                   np.stack([w.position_labels for w in windows]),
                   np.array([w.origin for w in windows]))


def slide_windows(tokens, labels, T: int, stride: int = 1) -> WindowSet:
    """Windows at offsets 0, stride, 2*stride, ...; floor((n-T)/stride)+1 of them."""
    tokens = np.asarray(tokens)
    labels = np.asarray(labels)
    if T < 2:
        raise ValueError("window length must be at least 2")
    if stride < 1:
        raise ValueError("stride must be positive")
    n = len(tokens)
    if n < T:
        raise ValueError(f"stream of {n} tokens is shorter than T={T}")
    tv = np.lib.stride_tricks.sliding_window_view(tokens, T)[::stride]
    lv = np.lib.stride_tricks.sliding_window_view(labels, T)[::stride]
    origins = np.arange(0, n - T + 1, stride)
    return WindowSet(tv, lv, origins)


def windows_from_frames(frames, vocab: IdVocabulary, T: int, stride: int = 1) -> WindowSet:
    tokens, labels = tokenize(frames, vocab)
    return slide_windows(tokens, labels, T, stride)


def split_train_valid(windows: WindowSet, valid_fraction: float, seed: int | None = None):
    """Contiguous tail split; the head keeps ceil((1 - fraction) * N) windows.

    ``seed`` is accepted for interface symmetry; the split is positional so that
    overlapping stride-1 windows do not leak across the boundary at random.
    """
    if not 0.0 < valid_fraction < 1.0:
        raise ValueError("valid_fraction must lie in (0, 1)")
    if windows.sequence_labels.any():
        raise ValueError("training pool contains abnormal windows")
    n = len(windows)
    if n < 2:
        raise ValueError("need at least two windows to split")
    n_train = min(max(math.ceil((1.0 - valid_fraction) * n - 1e-9), 1), n - 1)
    return windows[:n_train], windows[n_train:]


# ---------------------------------------------------------------- shard files

def write_shard(windows: WindowSet, path, *, stride: int, vocab: IdVocabulary) -> None:
    """Binary records (u32 tokens then u8 labels per window) + JSON manifest."""
    path = Path(path)
    n, T = windows.tokens.shape
    tok_bytes = windows.tokens.astype("<u4").view(np.uint8).reshape(n, 4 * T)
    path.write_bytes(np.concatenate([tok_bytes, windows.position_labels], axis=1).tobytes())
    manifest = {
        "T": windows.T,
        "stride": stride,
        "count": len(windows),
        "first_origin": int(windows.origins[0]) if len(windows) else 0,
        "vocab_sha256": vocab.digest(),
        "record_bytes": windows.T * 5,
    }
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(manifest, indent=2))


def read_shard(path, vocab: IdVocabulary | None = None) -> tuple[WindowSet, dict]:
    path = Path(path)
    manifest = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    if vocab is not None and manifest["vocab_sha256"] != vocab.digest():
        raise ValueError("window shard was built with a different vocabulary")
    T, count = manifest["T"], manifest["count"]
    raw = path.read_bytes()
    if len(raw) != count * T * 5:
        raise ValueError(f"shard size {len(raw)} does not match manifest ({count} x {T})")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(count, T * 5)
    tokens = rec[:, : 4 * T].copy().view("<u4").astype(np.int64)
    labels = rec[:, 4 * T:].copy()
    origins = manifest["first_origin"] + manifest["stride"] * np.arange(count)
    return WindowSet(tokens, labels, origins), manifest

