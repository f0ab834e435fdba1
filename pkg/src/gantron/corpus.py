"""Manifest ingestion, text encoding, style tokens, splits and batch collation."""

from __future__ import annotations

import json
import math
import re
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .mel_features import MelSpectrogram

EMOTIONS = ("anger", "fear", "happiness", "sadness", "neutral")
N_EMOTIONS = len(EMOTIONS)

STYLE_MODES = ("noise_only", "labels_only", "labels_plus_noise")

DEFAULT_SYMBOLS = ["_", "~", " "] + list("!'\",.:;?-") + [chr(c) for c in range(ord("a"), ord("z") + 1)]


@dataclass
class UtteranceRecord:
    id: str
    text: str
    mel_path: Optional[str] = None
    speaker_id: int = 0
    emotion_labels: Optional[np.ndarray] = None
    audio_path: Optional[str] = None
    dataset: str = "lj"

    def __post_init__(self):
        if not normalize_text(self.text):
            raise ValueError(f"record {self.id!r} has empty text")
        if self.emotion_labels is not None:
            labels = np.asarray(self.emotion_labels, dtype=np.float32)
            if labels.shape != (N_EMOTIONS,):
                raise ValueError(f"record {self.id!r}: emotion labels must have {N_EMOTIONS} entries")
            if np.any(labels < 0) or np.any(labels > 1):
                raise ValueError(f"record {self.id!r}: emotion labels must lie in [0, 1]")
            self.emotion_labels = labels


# -- manifests -------------------------------------------------------------

def _parse_lj(lines, base: Path):
    records = []
    for lineno, raw in enumerate(lines, start=1):
        line = raw.rstrip("\r\n")
        if not line.strip():
            continue
        parts = line.split("|")
        if len(parts) not in (2, 3) or not parts[0].strip():
            raise ValueError(f"line {lineno}: expected 'id|text' or 'id|text|normalized text'")
        utt_id = parts[0].strip()
        text = parts[2] if len(parts) == 3 and parts[2].strip() else parts[1]
        try:
            rec = UtteranceRecord(
                id=utt_id,
                text=text,
                speaker_id=0,
                emotion_labels=np.zeros(N_EMOTIONS, dtype=np.float32),
                audio_path=str(base / "wavs" / f"{utt_id}.wav"),
                dataset="lj",
            )
        except ValueError as exc:
            raise ValueError(f"line {lineno}: {exc}") from None
        records.append((lineno, rec))
    return records


def _parse_vesus(lines, base: Path):
    records = []
    for lineno, raw in enumerate(lines, start=1):
        if not raw.strip():
            continue
        try:
            obj = json.loads(raw)
            utt_id = str(obj["id"])
            labels = np.zeros(N_EMOTIONS, dtype=np.float32)
            for name, value in (obj.get("emotions") or {}).items():
                name = name.lower()
                if name not in EMOTIONS:
                    warnings.warn(f"line {lineno}: unsupported emotion {name!r} ignored")
                    continue
                labels[EMOTIONS.index(name)] = float(value)
            mel_path = obj.get("mel_path")
            if mel_path is not None and not Path(mel_path).is_absolute():
                mel_path = str(base / mel_path)
            audio_path = obj.get("audio_path")
            if audio_path is not None and not Path(audio_path).is_absolute():
                audio_path = str(base / audio_path)
            speaker = int(obj.get("speaker", 0))
            if speaker < 0:
                raise ValueError("speaker index must be non-negative")
            rec = UtteranceRecord(
                id=utt_id,
                text=str(obj["text"]),
                mel_path=mel_path,
                speaker_id=speaker,
                emotion_labels=labels,
                audio_path=audio_path,
                dataset="vesus",
            )
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"line {lineno}: malformed entry ({exc})") from None
        records.append((lineno, rec))
    return records


def parse_manifest(path, format: str) -> list[UtteranceRecord]:
    """Read an ``lj`` (pipe separated) or ``vesus`` (JSON lines) manifest.

    LJ records carry an all-zero emotion vector since that corpus is unlabelled.
    Relative paths in the manifest resolve against the manifest's directory.
    """
    path = Path(path)
    parsers = {"lj": _parse_lj, "vesus": _parse_vesus}
    if format not in parsers:
        raise ValueError(f"unknown manifest format {format!r}; expected one of {sorted(parsers)}")
    lines = path.read_text(encoding="utf-8").splitlines()
    parsed = parsers[format](lines, path.parent)
    if not parsed:
        warnings.warn(f"manifest {path} contains no records")
        return []
    seen: dict[str, int] = {}
    for lineno, rec in parsed:
        if rec.id in seen:
            raise ValueError(f"line {lineno}: duplicate id {rec.id!r} (first seen on line {seen[rec.id]})")
        seen[rec.id] = lineno
    return [rec for _, rec in parsed]


# -- text ------------------------------------------------------------------

_WS = re.compile(r"\s+")


def normalize_text(text: str) -> str:
    return _WS.sub(" ", text.lower()).strip()


class Charset:
    """Ordered symbol table; index 0 is padding and index 1 the unknown symbol."""

    def __init__(self, symbols: Sequence[str] = DEFAULT_SYMBOLS):
        symbols = list(symbols)
        if len(symbols) < 2:
            raise ValueError("charset needs at least a pad and an unknown symbol")
        if len(set(symbols)) != len(symbols):
            raise ValueError("charset symbols must be unique")
        self.symbols = symbols
        self.index = {s: i for i, s in enumerate(symbols)}
        self.unknown_count = 0

    pad_id = 0
    unk_id = 1

    def __len__(self):
        return len(self.symbols)

    def encode(self, text: str) -> list[int]:
        norm = normalize_text(text)
        if not norm:
            raise ValueError("text is empty after normalization")
        ids = []
        for ch in norm:
            idx = self.index.get(ch)
            if idx is None or idx < 2:
                self.unknown_count += 1
                idx = self.unk_id
            ids.append(idx)
        return ids

    @classmethod
    def from_file(cls, path) -> "Charset":
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        return cls(lines)

    def to_file(self, path) -> None:
        Path(path).write_text("\n".join(self.symbols) + "\n", encoding="utf-8")


def encode_text(text: str, charset: Charset) -> list[int]:
    return charset.encode(text)


# -- splits ----------------------------------------------------------------

def split_sizes(n: int, ratios: Sequence[float]) -> tuple[int, int, int]:
    """Validation and test sizes are rounded; rounding slack goes to train."""
    if len(ratios) != 3 or any(r < 0 for r in ratios):
        raise ValueError("ratios must be three non-negative numbers")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must sum to 1, got {sum(ratios)}")
    n_val = int(math.floor(n * ratios[1] + 0.5))
    n_test = int(math.floor(n * ratios[2] + 0.5))
    n_train = n - n_val - n_test
    if n_train < 0:
        raise ValueError("ratios leave no room for the training split")
    return n_train, n_val, n_test


def split_dataset(records, ratios=(0.85, 0.05, 0.10), seed: int = 0):
    records = list(records)
    if len(records) < 3:
        raise ValueError(f"need at least 3 records to split, got {len(records)}")
    n_train, n_val, _ = split_sizes(len(records), ratios)
    order = np.random.default_rng(seed).permutation(len(records))
    shuffled = [records[i] for i in order]
    return shuffled[:n_train], shuffled[n_train:n_train + n_val], shuffled[n_train + n_val:]


# -- style tokens ----------------------------------------------------------

@dataclass
class StyleToken:
    """Conditioning vector laid out as ``[speaker?] ++ [5 emotions?] ++ [noise?]``."""

    values: np.ndarray
    mode: str
    has_speaker: bool = False
    noise_dim: int = 0

    @property
    def emotion_slice(self) -> Optional[slice]:
        if self.mode == "noise_only":
            return None
        start = int(self.has_speaker)
        return slice(start, start + N_EMOTIONS)

    @property
    def emotions(self) -> Optional[np.ndarray]:
        sl = self.emotion_slice
        return None if sl is None else self.values[sl]

    @property
    def noise(self) -> np.ndarray:
        return self.values[len(self.values) - self.noise_dim:]

    def __len__(self):
        return len(self.values)


def style_token_length(mode: str, has_speaker: bool, noise_dim: int) -> int:
    if mode not in STYLE_MODES:
        raise ValueError(f"unknown style mode {mode!r}")
    return int(has_speaker) + (N_EMOTIONS if mode != "noise_only" else 0) + noise_dim


def build_style_token(
    mode: str,
    labels=None,
    speaker: Optional[tuple[int, int]] = None,
    noise_dim: int = 0,
    rng: Optional[np.random.Generator] = None,
) -> StyleToken:
    if mode not in STYLE_MODES:
        raise ValueError(f"unknown style mode {mode!r}; expected one of {STYLE_MODES}")
    if mode == "noise_only" and labels is not None:
        raise ValueError("noise_only tokens take no emotion labels")
    if mode == "labels_only" and noise_dim > 0:
        raise ValueError("labels_only tokens take no noise")
    if noise_dim < 0:
        raise ValueError("noise_dim must be non-negative")

    parts = []
    if speaker is not None:
        index, n_speakers = speaker
        if not 0 <= index < max(1, n_speakers):
            raise ValueError(f"speaker index {index} out of range for {n_speakers} speakers")
        parts.append(np.array([index / max(1, n_speakers - 1)], dtype=np.float32))
    if mode != "noise_only":
        lab = np.zeros(N_EMOTIONS, dtype=np.float32) if labels is None else np.asarray(labels, dtype=np.float32)
        if lab.shape != (N_EMOTIONS,):
            raise ValueError(f"labels must have {N_EMOTIONS} entries, got shape {lab.shape}")
        if np.any(lab < 0) or np.any(lab > 1):
            raise ValueError("emotion labels must lie in [0, 1]")
        parts.append(lab)
    if noise_dim:
        if rng is None:
            raise ValueError("an rng is required to draw noise")
        parts.append(rng.uniform(0.0, 1.0, size=noise_dim).astype(np.float32))
    values = np.concatenate(parts) if parts else np.zeros(0, dtype=np.float32)
    return StyleToken(values, mode=mode, has_speaker=speaker is not None, noise_dim=noise_dim)


# -- batching --------------------------------------------------------------

@dataclass
class PaddedBatch:
    text: torch.Tensor          # [B, N] long, 0-padded
    text_lengths: torch.Tensor  # [B]
    mels: torch.Tensor          # [B, n_mels, T]
    mel_lengths: torch.Tensor   # [B]
    gate_target: torch.Tensor   # [B, T]
    style: torch.Tensor         # [B, S]
    order: list[int] = field(default_factory=list)

    def __len__(self):
        return self.text.shape[0]

    @property
    def text_mask(self) -> torch.Tensor:
        return lengths_to_mask(self.text_lengths, self.text.shape[1])

    @property
    def mel_mask(self) -> torch.Tensor:
        return lengths_to_mask(self.mel_lengths, self.mels.shape[2])

    def to(self, dtype=None) -> "PaddedBatch":
        return PaddedBatch(
            self.text, self.text_lengths,
            self.mels.to(dtype), self.mel_lengths,
            self.gate_target.to(dtype), self.style.to(dtype), list(self.order),
        )


def lengths_to_mask(lengths: torch.Tensor, max_len: Optional[int] = None) -> torch.Tensor:
    """Boolean ``[B, max_len]`` mask, True on valid positions."""
    max_len = int(lengths.max()) if max_len is None else max_len
    return torch.arange(max_len)[None, :] < lengths[:, None]


def collate_batch(items) -> PaddedBatch:
    """Pad ``(symbols, MelSpectrogram, StyleToken)`` triples into one batch.

    Items are sorted by descending text length; ``order[i]`` is the input
    index of batch row ``i``.
    """
    items = list(items)
    if not items:
        raise ValueError("cannot collate an empty batch")
    n_mels = {it[1].n_mels for it in items}
    if len(n_mels) != 1:
        raise ValueError(f"inconsistent n_mels in batch: {sorted(n_mels)}")
    style_lens = {len(it[2]) for it in items}
    if len(style_lens) != 1:
        raise ValueError(f"inconsistent style token lengths in batch: {sorted(style_lens)}")
    if any(len(it[0]) == 0 for it in items):
        raise ValueError("empty symbol sequence in batch")

    order = sorted(range(len(items)), key=lambda i: -len(items[i][0]))
    n_mels = n_mels.pop()
    max_n = max(len(it[0]) for it in items)
    max_t = max(it[1].n_frames for it in items)
    B = len(items)

    text = torch.zeros(B, max_n, dtype=torch.long)
    mels = torch.zeros(B, n_mels, max_t)
    gate = torch.zeros(B, max_t)
    style = torch.zeros(B, style_lens.pop())
    text_lengths = torch.zeros(B, dtype=torch.long)
    mel_lengths = torch.zeros(B, dtype=torch.long)
    for row, i in enumerate(order):
        symbols, mel, token = items[i]
        text[row, :len(symbols)] = torch.as_tensor(symbols, dtype=torch.long)
        mels[row, :, :mel.n_frames] = torch.from_numpy(mel.data)
        gate[row, mel.n_frames - 1:] = 1.0
        style[row] = torch.from_numpy(np.asarray(token.values, dtype=np.float32))
        text_lengths[row] = len(symbols)
        mel_lengths[row] = mel.n_frames
    return PaddedBatch(text, text_lengths, mels, mel_lengths, gate, style, order)
