"""Window-based critics that score a mel spectrogram with one scalar.

Both kinds flatten ``window_size`` consecutive frames into one
``window_size * n_mels`` vector. The convolutional critic tiles the
spectrogram deterministically and convolves across the sequence of windows;
the linear critic draws windows with a random overlap and scores each one
independently. In both cases the spectrogram score is the mean output.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import NamedTuple, Optional, Sequence, Union

import numpy as np
import torch
from torch import Tensor, nn

from .mel_features import MelSpectrogram

KINDS = ("convolutional", "linear")


@dataclass(frozen=True)
class DiscriminatorConfig:
    kind: str = "linear"
    window_size: int = 20
    n_mels: int = 80
    hidden_dims: Optional[tuple] = None
    dropout: float = 0.5
    max_overlap: int = 10
    kernel_size: int = 5

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if self.window_size < 1:
            raise ValueError("window_size must be >= 1")
        # overlap only matters for the linear critic's random packing
        if self.kind == "linear" and not 0 <= self.max_overlap < self.window_size:
            raise ValueError("need 0 <= max_overlap < window_size")
        if self.kernel_size % 2 != 1:
            raise ValueError("kernel_size must be odd")
        if self.hidden_dims is None:
            dims = (1024, 512, 512, 512) if self.kind == "convolutional" else (512, 512, 512)
            object.__setattr__(self, "hidden_dims", dims)
        object.__setattr__(self, "hidden_dims", tuple(self.hidden_dims))

    @property
    def input_dim(self) -> int:
        return self.window_size * self.n_mels

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden_dims"] = list(self.hidden_dims)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DiscriminatorConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown discriminator config keys: {sorted(unknown)}")
        return cls(**d)


class WindowPack(NamedTuple):
    windows: Tensor        # [n_windows, window_size, n_mels]
    start_indices: list


def _as_tensor(mel) -> Tensor:
    if isinstance(mel, MelSpectrogram):
        return torch.from_numpy(mel.data)
    return torch.as_tensor(mel)


def window_starts(n_frames: int, window_size: int, kind: str, max_overlap: int = 0, rng=None) -> list[int]:
    """Start offsets of the windows covering ``n_frames`` frames.

    Inputs shorter than a window are treated as exactly one window (the caller
    pads). The final window is right-aligned to the last frame, so its overlap
    with the previous window may exceed ``max_overlap``.
    """
    if n_frames < 1:
        raise ValueError("cannot pack an empty spectrogram")
    if n_frames <= window_size:
        return [0]
    last = n_frames - window_size
    starts = [0]
    while starts[-1] < last:
        if kind == "convolutional":
            nxt = starts[-1] + window_size
        else:
            overlap = int(rng.integers(0, max_overlap + 1)) if max_overlap else 0
            nxt = starts[-1] + window_size - overlap
        starts.append(min(nxt, last))
    return starts


def pack_windows(mel, config: DiscriminatorConfig, rng: Optional[np.random.Generator] = None) -> WindowPack:
    data = _as_tensor(mel)
    if data.dim() != 2 or data.shape[1] == 0:
        raise ValueError("expected a non-empty [n_mels, n_frames] spectrogram")
    if data.shape[0] != config.n_mels:
        raise ValueError(f"spectrogram has {data.shape[0]} bands, critic expects {config.n_mels}")
    w = config.window_size
    if data.shape[1] < w:
        pad = data[:, -1:].expand(-1, w - data.shape[1])
        data = torch.cat([data, pad], dim=1)
    if config.kind == "linear" and config.max_overlap and rng is None:
        raise ValueError("linear packing with random overlap needs an rng")
    starts = window_starts(data.shape[1], w, config.kind, config.max_overlap, rng)
    windows = torch.stack([data[:, s:s + w].transpose(0, 1) for s in starts])
    return WindowPack(windows, starts)


class ConvDiscriminator(nn.Module):
    """Four ``Conv1d + Dropout + Tanh`` blocks and a final ``Conv1d`` over the window axis."""

    def __init__(self, config: DiscriminatorConfig):
        super().__init__()
        if config.kind != "convolutional":
            raise ValueError("ConvDiscriminator needs kind='convolutional'")
        self.config = config
        chans = [config.input_dim, *config.hidden_dims]
        pad = (config.kernel_size - 1) // 2
        blocks = []
        for a, b in zip(chans[:-1], chans[1:]):
            blocks += [nn.Conv1d(a, b, config.kernel_size, padding=pad), nn.Dropout(config.dropout), nn.Tanh()]
        blocks.append(nn.Conv1d(chans[-1], config.n_mels, config.kernel_size, padding=pad))
        self.net = nn.Sequential(*blocks)

    def score(self, mel, rng=None) -> Tensor:
        pack = pack_windows(mel, self.config)
        x = pack.windows.reshape(len(pack.start_indices), -1).transpose(0, 1)[None]
        return self.net(x).mean()


class LinearDiscriminator(nn.Module):
    """Three ``Linear + Dropout + Tanh`` blocks and a final ``Linear`` to one unit, per window."""

    def __init__(self, config: DiscriminatorConfig):
        super().__init__()
        if config.kind != "linear":
            raise ValueError("LinearDiscriminator needs kind='linear'")
        self.config = config
        dims = [config.input_dim, *config.hidden_dims]
        blocks = []
        for a, b in zip(dims[:-1], dims[1:]):
            blocks += [nn.Linear(a, b), nn.Dropout(config.dropout), nn.Tanh()]
        blocks.append(nn.Linear(dims[-1], 1))
        self.net = nn.Sequential(*blocks)

    def window_scores(self, windows: Tensor) -> Tensor:
        return self.net(windows.reshape(windows.shape[0], -1)).squeeze(1)

    def score(self, mel, rng=None) -> Tensor:
        pack = pack_windows(mel, self.config, rng)
        if pack.windows.shape[1] != self.config.window_size:
            raise ValueError("window shorter than window_size after padding")
        return self.window_scores(pack.windows).mean()


Discriminator = Union[ConvDiscriminator, LinearDiscriminator]


def build_discriminator(config: DiscriminatorConfig, seed: int = 0) -> Discriminator:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        cls = ConvDiscriminator if config.kind == "convolutional" else LinearDiscriminator
        return cls(config)


def num_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def conv_disc_score(mel, model: ConvDiscriminator) -> Tensor:
    if not isinstance(model, ConvDiscriminator):
        raise TypeError("conv_disc_score needs a convolutional discriminator")
    return model.score(mel)


def linear_disc_score(mel, model: LinearDiscriminator, rng: np.random.Generator) -> Tensor:
    if not isinstance(model, LinearDiscriminator):
        raise TypeError("linear_disc_score needs a linear discriminator")
    return model.score(mel, rng)


def score_batch(model: Discriminator, mels: Tensor, lengths: Sequence[int], rng=None) -> Tensor:
    """Per-item scores ``[B]`` for a padded ``[B, n_mels, T]`` batch, ignoring padding."""
    lengths = [int(n) for n in lengths]
    if isinstance(model, LinearDiscriminator):
        packs = [pack_windows(mels[i, :, :n], model.config, rng) for i, n in enumerate(lengths)]
        counts = torch.tensor([len(p.start_indices) for p in packs])
        scores = model.window_scores(torch.cat([p.windows for p in packs]))
        owner = torch.repeat_interleave(torch.arange(len(packs)), counts)
        sums = scores.new_zeros(len(packs)).index_add(0, owner, scores)
        return sums / counts.to(scores.dtype)
    return torch.stack([model.score(mels[i, :, :n]) for i, n in enumerate(lengths)])
