"""Waveform to log-mel conversion and the binary ``.mel`` container.

Mel scale:
    mel = 2595 * log10(1 + hz / 700)
    hz = 700 * (10 ** (mel / 2595) - 1)

Framing uses no implicit padding, so a waveform of ``L`` samples yields
``floor((L - win_length) / hop_length) + 1`` frames.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Union

import numpy as np

MAGIC = b"MELS"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIIIII")

LOG_FLOOR = 1e-5


@dataclass(frozen=True)
class MelConfig:
    sample_rate: int = 22050
    n_fft: int = 1024
    hop_length: int = 256
    win_length: int = 1024
    n_mels: int = 80
    fmin: float = 0.0
    fmax: float = 8000.0

    def __post_init__(self):
        if self.n_mels <= 0:
            raise ValueError(f"n_mels must be positive, got {self.n_mels}")
        if not 0 <= self.fmin < self.fmax:
            raise ValueError(f"need 0 <= fmin < fmax, got fmin={self.fmin}, fmax={self.fmax}")
        if self.fmax > self.sample_rate / 2:
            raise ValueError(
                f"fmax={self.fmax} exceeds the Nyquist frequency {self.sample_rate / 2}"
            )
        if not 0 < self.hop_length <= self.win_length <= self.n_fft:
            raise ValueError(
                "need 0 < hop_length <= win_length <= n_fft, got "
                f"{self.hop_length}, {self.win_length}, {self.n_fft}"
            )

    @property
    def n_freqs(self) -> int:
        return self.n_fft // 2 + 1


@dataclass
class MelSpectrogram:
    """Log-mel matrix of shape ``[n_mels, n_frames]`` stored as float32.

    Only the fields the container carries (sample rate and hop) travel with
    the data; the full :class:`MelConfig` is a property of the extractor.
    """

    data: np.ndarray
    sample_rate: int = 22050
    hop_length: int = 256

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim != 2:
            raise ValueError(f"mel data must be 2-D [n_mels, n_frames], got shape {data.shape}")
        if data.shape[0] < 1 or data.shape[1] < 1:
            raise ValueError(f"mel must have at least one band and one frame, got {data.shape}")
        if not np.isfinite(data).all():
            raise ValueError("mel contains non-finite entries")
        self.data = data

    @property
    def n_mels(self) -> int:
        return self.data.shape[0]

    @property
    def n_frames(self) -> int:
        return self.data.shape[1]

    def __eq__(self, other):
        if not isinstance(other, MelSpectrogram):
            return NotImplemented
        return (
            self.sample_rate == other.sample_rate
            and self.hop_length == other.hop_length
            and self.data.shape == other.data.shape
            and self.data.tobytes() == other.data.tobytes()
        )


def hz_to_mel(f):
    """Convert Hertz to mels. Accepts scalars or arrays; negative input is rejected."""
    f_arr = np.asarray(f, dtype=np.float64)
    if np.any(f_arr < 0):
        raise ValueError("frequency must be non-negative")
    out = 2595.0 * np.log10(1.0 + f_arr / 700.0)
    return float(out) if out.ndim == 0 else out


def mel_to_hz(m):
    m_arr = np.asarray(m, dtype=np.float64)
    if np.any(m_arr < 0):
        raise ValueError("mel value must be non-negative")
    out = 700.0 * (10.0 ** (m_arr / 2595.0) - 1.0)
    return float(out) if out.ndim == 0 else out


def mel_band_edges(config: MelConfig) -> np.ndarray:
    """The ``n_mels + 2`` triangle vertices in Hz, equally spaced on the mel axis."""
    mels = np.linspace(hz_to_mel(config.fmin), hz_to_mel(config.fmax), config.n_mels + 2)
    return mel_to_hz(mels)


def mel_band_centers(config: MelConfig) -> np.ndarray:
    return mel_band_edges(config)[1:-1]


def build_mel_filterbank(config: MelConfig) -> np.ndarray:
    """Triangular filterbank of shape ``[n_mels, n_fft // 2 + 1]``.

    Each row peaks at 1.0 at its mel-spaced center and falls linearly to zero
    at the neighbouring centers. Raises if the FFT is too coarse for some band
    to cover any bin.
    """
    edges = mel_band_edges(config)
    freqs = np.arange(config.n_freqs) * config.sample_rate / config.n_fft
    left, center, right = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs[None, :] - left) / (center - left)
    falling = (right - freqs[None, :]) / (right - center)
    weights = np.maximum(0.0, np.minimum(rising, falling))
    empty = np.flatnonzero(weights.sum(axis=1) <= 0)
    if empty.size:
        raise ValueError(
            f"mel bands {empty.tolist()} cover no FFT bin; increase n_fft or reduce n_mels"
        )
    return weights


def frame_count(n_samples: int, config: MelConfig) -> int:
    if n_samples < config.win_length:
        raise ValueError(
            f"waveform of {n_samples} samples is shorter than one window ({config.win_length})"
        )
    return (n_samples - config.win_length) // config.hop_length + 1


def magnitude_stft(samples: np.ndarray, config: MelConfig) -> np.ndarray:
    """Magnitude spectrogram ``[n_fft // 2 + 1, n_frames]`` with a periodic Hann window."""
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 1 or x.size == 0:
        raise ValueError("waveform must be a non-empty 1-D array")
    n_frames = frame_count(x.size, config)
    starts = np.arange(n_frames) * config.hop_length
    frames = x[starts[:, None] + np.arange(config.win_length)[None, :]]
    window = np.hanning(config.win_length + 1)[:-1]
    spec = np.fft.rfft(frames * window, n=config.n_fft, axis=1)
    return np.abs(spec).T


def waveform_to_mel(samples: np.ndarray, config: MelConfig = MelConfig()) -> MelSpectrogram:
    mag = magnitude_stft(samples, config)
    energies = build_mel_filterbank(config) @ mag
    data = np.log(np.maximum(energies, LOG_FLOOR))
    return MelSpectrogram(data, sample_rate=config.sample_rate, hop_length=config.hop_length)


# -- container -------------------------------------------------------------

PathLike = Union[str, Path]


def mel_to_bytes(mel: MelSpectrogram) -> bytes:
    header = _HEADER.pack(
        MAGIC, FORMAT_VERSION, mel.n_mels, mel.n_frames, mel.sample_rate, mel.hop_length
    )
    return header + np.ascontiguousarray(mel.data, dtype="<f4").tobytes()


def mel_from_bytes(blob: bytes) -> MelSpectrogram:
    if len(blob) < _HEADER.size:
        raise ValueError("truncated mel container header")
    magic, version, n_mels, n_frames, sample_rate, hop = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise ValueError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported mel container version {version}")
    expected = _HEADER.size + 4 * n_mels * n_frames
    if len(blob) != expected:
        raise ValueError(f"mel container has {len(blob)} bytes, expected {expected}")
    data = np.frombuffer(blob, dtype="<f4", offset=_HEADER.size).reshape(n_mels, n_frames)
    return MelSpectrogram(data.astype(np.float32), sample_rate=sample_rate, hop_length=hop)


def write_mel(mel: MelSpectrogram, dest: Union[PathLike, BinaryIO]) -> None:
    blob = mel_to_bytes(mel)
    if isinstance(dest, (str, Path)):
        Path(dest).write_bytes(blob)
    else:
        dest.write(blob)


def read_mel(src: Union[PathLike, BinaryIO]) -> MelSpectrogram:
    if isinstance(src, (str, Path)):
        return mel_from_bytes(Path(src).read_bytes())
    return mel_from_bytes(src.read())
