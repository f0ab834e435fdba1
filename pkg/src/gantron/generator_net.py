"""Style-conditioned sequence-to-sequence mel generator.

Character embedding -> conv stack -> bidirectional LSTM encoder; a
location-sensitive attention decoder with a pre-net emits one mel frame and
one stop-gate logit per step; a residual conv post-net refines the frames.
The style token is concatenated either to the embedding output (``encoder``
placement) or to the encoder output (``decoder`` placement).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from typing import NamedTuple, Optional

import torch
from torch import Tensor, nn
from torch.nn import functional as F

from .corpus import DEFAULT_SYMBOLS, PaddedBatch, lengths_to_mask

PLACEMENTS = ("encoder", "decoder")


@dataclass(frozen=True)
class GeneratorConfig:
    n_symbols: int = len(DEFAULT_SYMBOLS)
    embedding_dim: int = 512
    encoder_n_convs: int = 3
    encoder_kernel_size: int = 5
    encoder_filters: int = 512
    encoder_rnn_dim: int = 256  # per direction
    encoder_dropout: float = 0.5
    style_dim: int = 6
    style_placement: str = "decoder"
    prenet_dims: tuple = (256, 256)
    prenet_dropout: float = 0.5
    attention_rnn_dim: int = 1024
    decoder_rnn_dim: int = 1024
    attention_dim: int = 128
    location_filters: int = 32
    location_kernel_size: int = 31
    attention_dropout: float = 0.1
    decoder_dropout: float = 0.1
    n_mels: int = 80
    postnet_n_convs: int = 5
    postnet_filters: int = 512
    postnet_kernel_size: int = 5
    postnet_dropout: float = 0.5
    max_decoder_steps: int = 1000
    gate_threshold: float = 0.5
    init: str = "uniform_fan_in"

    def __post_init__(self):
        if self.style_placement not in PLACEMENTS:
            raise ValueError(f"style_placement must be one of {PLACEMENTS}, got {self.style_placement!r}")
        if self.style_dim < 0:
            raise ValueError("style_dim must be non-negative")
        for name in ("n_symbols", "embedding_dim", "encoder_filters", "encoder_rnn_dim",
                     "attention_rnn_dim", "decoder_rnn_dim", "attention_dim", "n_mels",
                     "postnet_filters", "max_decoder_steps", "location_filters"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("encoder_kernel_size", "postnet_kernel_size", "location_kernel_size"):
            if getattr(self, name) % 2 != 1:
                raise ValueError(f"{name} must be odd to keep sequence lengths")
        if self.postnet_n_convs < 2 or self.encoder_n_convs < 1:
            raise ValueError("need at least one encoder conv and two post-net convs")
        if not self.prenet_dims:
            raise ValueError("prenet needs at least one layer")
        if self.init != "uniform_fan_in":
            raise ValueError(f"unsupported init scheme {self.init!r}")
        object.__setattr__(self, "prenet_dims", tuple(self.prenet_dims))

    @property
    def memory_dim(self) -> int:
        extra = self.style_dim if self.style_placement == "decoder" else 0
        return 2 * self.encoder_rnn_dim + extra

    def to_dict(self) -> dict:
        d = asdict(self)
        d["prenet_dims"] = list(self.prenet_dims)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown generator config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def tiny(cls, **overrides) -> "GeneratorConfig":
        base = dict(
            embedding_dim=16, encoder_n_convs=1, encoder_filters=16, encoder_rnn_dim=16,
            prenet_dims=(32, 32), attention_rnn_dim=32, decoder_rnn_dim=32, attention_dim=16,
            location_filters=4, location_kernel_size=7, n_mels=16, postnet_n_convs=2,
            postnet_filters=16, max_decoder_steps=200,
        )
        base.update(overrides)
        return cls(**base)


class GeneratorOutput(NamedTuple):
    mel_output: Tensor          # [B, n_mels, T]
    mel_postnet_output: Tensor  # [B, n_mels, T]
    gate_out: Tensor            # [B, T] logits
    alignments: Tensor          # [B, T, N]


@dataclass
class DecoderState:
    memory: Tensor
    processed_memory: Tensor
    mask: Tensor
    attention_hidden: Tensor
    attention_cell: Tensor
    decoder_hidden: Tensor
    decoder_cell: Tensor
    attention_weights: Tensor
    attention_weights_cum: Tensor
    attention_context: Tensor
    step: int = 0


def inject_style(sequence: Tensor, style: Tensor) -> Tensor:
    """Broadcast ``style`` ``[B, S]`` along time and append it to ``sequence`` ``[B, N, D]``."""
    if style.shape[-1] == 0:
        return sequence
    if style.dim() == 1:
        style = style.unsqueeze(0).expand(sequence.shape[0], -1)
    return torch.cat([sequence, style[:, None, :].expand(-1, sequence.shape[1], -1)], dim=2)


class ConvNorm(nn.Sequential):
    def __init__(self, in_ch, out_ch, kernel_size):
        super().__init__(
            nn.Conv1d(in_ch, out_ch, kernel_size, padding=(kernel_size - 1) // 2),
            nn.BatchNorm1d(out_ch),
        )


class Encoder(nn.Module):
    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        in_dim = cfg.embedding_dim + (cfg.style_dim if cfg.style_placement == "encoder" else 0)
        convs = []
        for i in range(cfg.encoder_n_convs):
            convs.append(ConvNorm(in_dim if i == 0 else cfg.encoder_filters, cfg.encoder_filters,
                                  cfg.encoder_kernel_size))
        self.convs = nn.ModuleList(convs)
        self.dropout = cfg.encoder_dropout
        self.lstm = nn.LSTM(cfg.encoder_filters, cfg.encoder_rnn_dim, batch_first=True, bidirectional=True)

    def forward(self, x: Tensor, lengths: Tensor) -> Tensor:
        # x: [B, N, D]
        x = x.transpose(1, 2)
        for conv in self.convs:
            x = F.dropout(F.relu(conv(x)), self.dropout, self.training)
        x = x.transpose(1, 2)
        packed = nn.utils.rnn.pack_padded_sequence(x, lengths.cpu(), batch_first=True, enforce_sorted=False)
        out, _ = self.lstm(packed)
        out, _ = nn.utils.rnn.pad_packed_sequence(out, batch_first=True, total_length=x.shape[1])
        return out


class Prenet(nn.Module):
    """Bias-free ReLU layers with dropout.

    Dropout is on in training mode. In eval mode it is applied only when a
    ``torch.Generator`` is passed, which makes synthesis-time dropout reproducible.
    """

    def __init__(self, in_dim, sizes, p):
        super().__init__()
        dims = [in_dim, *sizes]
        self.layers = nn.ModuleList(nn.Linear(a, b, bias=False) for a, b in zip(dims[:-1], dims[1:]))
        self.p = p

    def forward(self, x: Tensor, generator: Optional[torch.Generator] = None) -> Tensor:
        for layer in self.layers:
            x = F.relu(layer(x))
            if self.training:
                x = F.dropout(x, self.p, True)
            elif generator is not None and self.p > 0:
                keep = torch.rand(x.shape, generator=generator, dtype=x.dtype) >= self.p
                x = x * keep.to(x.dtype) / (1.0 - self.p)
        return x


class LocationSensitiveAttention(nn.Module):
    def __init__(self, query_dim, memory_dim, attention_dim, n_filters, kernel_size):
        super().__init__()
        self.query_layer = nn.Linear(query_dim, attention_dim, bias=False)
        self.memory_layer = nn.Linear(memory_dim, attention_dim, bias=False)
        self.v = nn.Linear(attention_dim, 1, bias=False)
        self.location_conv = nn.Conv1d(2, n_filters, kernel_size, padding=(kernel_size - 1) // 2, bias=False)
        self.location_dense = nn.Linear(n_filters, attention_dim, bias=False)

    def forward(self, query, memory, processed_memory, weights_cat, mask):
        loc = self.location_dense(self.location_conv(weights_cat).transpose(1, 2))
        energies = self.v(torch.tanh(self.query_layer(query)[:, None, :] + loc + processed_memory)).squeeze(2)
        energies = energies.masked_fill(~mask, torch.finfo(energies.dtype).min)
        weights = F.softmax(energies, dim=1)
        context = torch.bmm(weights[:, None, :], memory).squeeze(1)
        return context, weights


class Decoder(nn.Module):
    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        self.cfg = cfg
        mem = cfg.memory_dim
        self.prenet = Prenet(cfg.n_mels, cfg.prenet_dims, cfg.prenet_dropout)
        self.attention_rnn = nn.LSTMCell(cfg.prenet_dims[-1] + mem, cfg.attention_rnn_dim)
        self.attention = LocationSensitiveAttention(
            cfg.attention_rnn_dim, mem, cfg.attention_dim, cfg.location_filters, cfg.location_kernel_size
        )
        self.decoder_rnn = nn.LSTMCell(cfg.attention_rnn_dim + mem, cfg.decoder_rnn_dim)
        self.linear_projection = nn.Linear(cfg.decoder_rnn_dim + mem, cfg.n_mels)
        self.gate_layer = nn.Linear(cfg.decoder_rnn_dim + mem, 1)

    def init_state(self, memory: Tensor, text_lengths: Tensor) -> DecoderState:
        B, N, _ = memory.shape
        cfg = self.cfg
        z = lambda *shape: memory.new_zeros(*shape)  # noqa: E731
        return DecoderState(
            memory=memory,
            processed_memory=self.attention.memory_layer(memory),
            mask=lengths_to_mask(text_lengths, N),
            attention_hidden=z(B, cfg.attention_rnn_dim),
            attention_cell=z(B, cfg.attention_rnn_dim),
            decoder_hidden=z(B, cfg.decoder_rnn_dim),
            decoder_cell=z(B, cfg.decoder_rnn_dim),
            attention_weights=z(B, N),
            attention_weights_cum=z(B, N),
            attention_context=z(B, memory.shape[2]),
        )

    def step(self, prenet_frame: Tensor, s: DecoderState):
        cfg = self.cfg
        h, c = self.attention_rnn(torch.cat([prenet_frame, s.attention_context], 1),
                                  (s.attention_hidden, s.attention_cell))
        h = F.dropout(h, cfg.attention_dropout, self.training)
        weights_cat = torch.stack([s.attention_weights, s.attention_weights_cum], dim=1)
        context, weights = self.attention(h, s.memory, s.processed_memory, weights_cat, s.mask)
        dh, dc = self.decoder_rnn(torch.cat([h, context], 1), (s.decoder_hidden, s.decoder_cell))
        dh = F.dropout(dh, cfg.decoder_dropout, self.training)
        out = torch.cat([dh, context], 1)
        frame = self.linear_projection(out)
        gate = self.gate_layer(out).squeeze(1)
        new = DecoderState(
            memory=s.memory, processed_memory=s.processed_memory, mask=s.mask,
            attention_hidden=h, attention_cell=c, decoder_hidden=dh, decoder_cell=dc,
            attention_weights=weights, attention_weights_cum=s.attention_weights_cum + weights,
            attention_context=context, step=s.step + 1,
        )
        return frame, gate, weights, new

    def forward(self, memory, targets, text_lengths):
        """Teacher-forced decoding; ``targets`` is ``[B, n_mels, T]``."""
        B, _, T = targets.shape
        go = targets.new_zeros(B, 1, self.cfg.n_mels)
        prev = torch.cat([go, targets.transpose(1, 2)[:, :-1]], dim=1)
        prenet_out = self.prenet(prev)
        state = self.init_state(memory, text_lengths)
        frames, gates, aligns = [], [], []
        for t in range(T):
            frame, gate, weights, state = self.step(prenet_out[:, t], state)
            if not torch.isfinite(frame).all() or not torch.isfinite(gate).all():
                raise FloatingPointError(f"non-finite decoder output at step {t}")
            frames.append(frame)
            gates.append(gate)
            aligns.append(weights)
        return torch.stack(frames, 2), torch.stack(gates, 1), torch.stack(aligns, 1)


class Postnet(nn.Module):
    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        chans = [cfg.n_mels] + [cfg.postnet_filters] * (cfg.postnet_n_convs - 1) + [cfg.n_mels]
        self.convs = nn.ModuleList(
            ConvNorm(a, b, cfg.postnet_kernel_size) for a, b in zip(chans[:-1], chans[1:])
        )
        self.dropout = cfg.postnet_dropout

    def forward(self, x):
        last = len(self.convs) - 1
        for i, conv in enumerate(self.convs):
            x = conv(x)
            if i < last:
                x = torch.tanh(x)
            x = F.dropout(x, self.dropout, self.training)
        return x


class Generator(nn.Module):
    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        self.cfg = cfg
        self.embedding = nn.Embedding(cfg.n_symbols, cfg.embedding_dim)
        self.encoder = Encoder(cfg)
        self.decoder = Decoder(cfg)
        self.postnet = Postnet(cfg)

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def _check_style(self, style: Tensor):
        if style.shape[-1] != self.cfg.style_dim:
            raise ValueError(f"style token length {style.shape[-1]} != configured {self.cfg.style_dim}")

    def inject_style(self, sequence: Tensor, style: Tensor, placement: str) -> Tensor:
        if placement != self.cfg.style_placement:
            raise ValueError(f"placement {placement!r} does not match configured {self.cfg.style_placement!r}")
        self._check_style(style)
        return inject_style(sequence, style)

    def encode(self, text: Tensor, text_lengths: Tensor, style: Tensor) -> tuple[Tensor, Tensor]:
        """Return ``(encoder_outputs, memory)``; memory carries the style for decoder placement."""
        self._check_style(style)
        x = self.embedding(text)
        if self.cfg.style_placement == "encoder":
            x = inject_style(x, style)
        enc = self.encoder(x, text_lengths)
        memory = inject_style(enc, style) if self.cfg.style_placement == "decoder" else enc
        return enc, memory

    def forward(self, batch: PaddedBatch) -> GeneratorOutput:
        return self.forward_teacher_forced(batch)

    def forward_teacher_forced(self, batch: PaddedBatch) -> GeneratorOutput:
        if batch.mels.shape[1] != self.cfg.n_mels:
            raise ValueError(f"batch has {batch.mels.shape[1]} mel bands, model expects {self.cfg.n_mels}")
        _, memory = self.encode(batch.text, batch.text_lengths, batch.style)
        mel, gate, align = self.decoder(memory, batch.mels, batch.text_lengths)
        return GeneratorOutput(mel, mel + self.postnet(mel), gate, align)

    def init_decoder_state(self, text: Tensor, text_lengths: Tensor, style: Tensor) -> DecoderState:
        _, memory = self.encode(text, text_lengths, style)
        return self.decoder.init_state(memory, text_lengths)

    def decode_step(self, prev_frame: Tensor, state: Optional[DecoderState],
                    generator: Optional[torch.Generator] = None):
        """One autoregressive step: ``(frame, gate_logit, attention_weights, new_state)``."""
        if state is None:
            raise RuntimeError("decoder state is not initialized; call init_decoder_state first")
        if prev_frame.shape[-1] != self.cfg.n_mels:
            raise ValueError(f"previous frame has {prev_frame.shape[-1]} bands, expected {self.cfg.n_mels}")
        if prev_frame.dim() == 1:
            prev_frame = prev_frame.unsqueeze(0)
        return self.decoder.step(self.decoder.prenet(prev_frame, generator), state)


def build_generator(config: GeneratorConfig, seed: int = 0) -> Generator:
    """Construct a generator with seeded, PyTorch-default (uniform fan-in) initialization.

    The global torch RNG is left untouched.
    """
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return Generator(config)
