"""Generator and critic losses, guided attention, and the warm-up gate.

All reconstruction terms are masked means so their magnitude does not depend
on batch size or padding.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import Optional, Union

import torch
import torch.nn.functional as F

from .corpus import lengths_to_mask

Number = Union[float, torch.Tensor]


@dataclass(frozen=True)
class GuidedAttentionConfig:
    g: float = 0.2
    warmup_steps: int = 5000
    enabled: bool = True

    def __post_init__(self):
        if self.g <= 0:
            raise ValueError("guided attention sharpness g must be positive")
        if self.warmup_steps < 0:
            raise ValueError("warmup_steps must be non-negative")


@dataclass(frozen=True)
class LossWeights:
    mel: float = 1.0
    gate: float = 1.0
    wasserstein: float = 1.0
    attn: float = 1.0


@dataclass
class LossReport:
    mel_loss: Number = 0.0
    gate_loss: Number = 0.0
    wasserstein_term: Number = 0.0
    attn_loss: Number = 0.0
    total: Number = 0.0
    step: int = 0
    kind: str = "generator"

    def detached(self) -> "LossReport":
        """Copy with every component converted to a Python float."""
        out = {f.name: getattr(self, f.name) for f in fields(self)}
        return LossReport(**{k: float(v.detach()) if isinstance(v, torch.Tensor) else v for k, v in out.items()})

    def log_line(self, phase: str) -> str:
        r = self.detached()
        fields = [r.mel_loss, r.gate_loss, r.wasserstein_term, r.attn_loss, r.total]
        return "\t".join([str(self.step), *(repr(float(x)) for x in fields), phase])


def _masked_mean(values: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    mask = mask.to(values.dtype)
    denom = mask.sum()
    if denom <= 0:
        raise ValueError("mask selects no elements")
    return (values * mask).sum() / denom


def mel_loss(mel_output, mel_postnet_output, mel_target, mask) -> torch.Tensor:
    """Sum of the masked MSE of post-net and pre-net outputs against the target.

    ``mask`` is ``[B, T]`` over frames and is broadcast across mel bands.
    """
    if not (mel_output.shape == mel_postnet_output.shape == mel_target.shape):
        raise ValueError(
            f"shape mismatch: {tuple(mel_output.shape)}, {tuple(mel_postnet_output.shape)}, "
            f"{tuple(mel_target.shape)}"
        )
    full = mask[:, None, :].expand_as(mel_target)
    post = _masked_mean((mel_postnet_output - mel_target) ** 2, full)
    pre = _masked_mean((mel_output - mel_target) ** 2, full)
    return post + pre


def gate_loss(gate_out, gate_target, mask) -> torch.Tensor:
    if gate_out.shape != gate_target.shape:
        raise ValueError(f"shape mismatch: {tuple(gate_out.shape)} vs {tuple(gate_target.shape)}")
    if not torch.all((gate_target == 0) | (gate_target == 1)):
        raise ValueError("gate targets must be 0 or 1")
    bce = F.binary_cross_entropy_with_logits(gate_out, gate_target, reduction="none")
    return _masked_mean(bce, mask)


def guided_attention_weights(n_text: int, n_frames: int, g: float = 0.2, dtype=torch.float32):
    """``W[t, n] = 1 - exp(-(n/N - t/T)^2 / (2 g^2))`` of shape ``[T, N]``."""
    if n_text < 1 or n_frames < 1:
        raise ValueError("text and decoder lengths must be at least 1")
    n = torch.arange(n_text, dtype=dtype) / n_text
    t = torch.arange(n_frames, dtype=dtype) / n_frames
    return 1.0 - torch.exp(-((n[None, :] - t[:, None]) ** 2) / (2 * g * g))


def _batched_guide(text_lengths, mel_lengths, max_t, max_n, g, dtype):
    n = torch.arange(max_n, dtype=dtype)[None, None, :] / text_lengths.to(dtype)[:, None, None]
    t = torch.arange(max_t, dtype=dtype)[None, :, None] / mel_lengths.to(dtype)[:, None, None]
    weights = 1.0 - torch.exp(-((n - t) ** 2) / (2 * g * g))
    valid = lengths_to_mask(mel_lengths, max_t)[:, :, None] & lengths_to_mask(text_lengths, max_n)[:, None, :]
    return weights, valid


def guided_attention_loss(
    alignments: torch.Tensor,
    text_lengths: Optional[torch.Tensor],
    mel_lengths: Optional[torch.Tensor],
    g: float = 0.2,
) -> torch.Tensor:
    """Mean of ``alignment * W`` over each item's valid cells, averaged over the batch.

    ``alignments`` is ``[B, T, N]``. The guide for each item is built from its
    own unpadded lengths, so enlarging the padded canvas leaves the value unchanged.
    """
    if text_lengths is None or mel_lengths is None:
        raise ValueError("guided attention loss needs text and mel lengths")
    B, T, N = alignments.shape
    weights, valid = _batched_guide(text_lengths, mel_lengths, T, N, g, alignments.dtype)
    valid = valid.to(alignments.dtype)
    per_item = (alignments * weights * valid).sum(dim=(1, 2)) / valid.sum(dim=(1, 2))
    return per_item.mean()


def diagonal_mass(alignments, text_lengths, mel_lengths, band: float = 0.15) -> float:
    """Mean attention weight falling within ``|n/N - t/T| < band`` per valid decoder step."""
    B, T, N = alignments.shape
    dtype = alignments.dtype
    n = torch.arange(N, dtype=dtype)[None, None, :] / text_lengths.to(dtype)[:, None, None]
    t = torch.arange(T, dtype=dtype)[None, :, None] / mel_lengths.to(dtype)[:, None, None]
    in_band = ((n - t).abs() < band) & lengths_to_mask(text_lengths, N)[:, None, :]
    per_step = (alignments * in_band.to(dtype)).sum(dim=2)
    step_mask = lengths_to_mask(mel_lengths, T)
    return float(_masked_mean(per_step, step_mask))


def _check_scores(scores, name):
    scores = torch.as_tensor(scores)
    if scores.numel() == 0:
        raise ValueError(f"{name} is empty")
    return scores


def wasserstein_critic_loss(real_scores, fake_scores) -> torch.Tensor:
    """``mean(fake) - mean(real)``, minimized by the critic."""
    real = _check_scores(real_scores, "real_scores")
    fake = _check_scores(fake_scores, "fake_scores")
    return fake.mean() - real.mean()


def wasserstein_generator_term(fake_scores) -> torch.Tensor:
    return -_check_scores(fake_scores, "fake_scores").mean()


def warmup_active(step: int, config: GuidedAttentionConfig) -> bool:
    return config.enabled and step < config.warmup_steps


def generator_total_loss(
    components,
    step: int,
    attn_config: GuidedAttentionConfig = GuidedAttentionConfig(),
    weights: LossWeights = LossWeights(),
) -> LossReport:
    """Weighted sum of the four generator terms.

    ``components`` maps ``mel``, ``gate``, ``wasserstein`` and ``attn`` to
    scalars (floats or tensors). Outside the warm-up window the attention term
    is reported as exactly zero. Tensor inputs give a tensor ``total`` that can
    be back-propagated.
    """
    names = {"mel": "mel_loss", "gate": "gate_loss", "wasserstein": "wasserstein_term", "attn": "attn_loss"}
    values = {}
    for key in names:
        v = components.get(key, 0.0)
        scalar = float(v.detach()) if isinstance(v, torch.Tensor) else float(v)
        if not math.isfinite(scalar):
            raise FloatingPointError(f"non-finite {key} loss component: {scalar}")
        values[key] = v
    if not warmup_active(step, attn_config):
        values["attn"] = 0.0
    total = (
        weights.mel * values["mel"]
        + weights.gate * values["gate"]
        + weights.wasserstein * values["wasserstein"]
        + weights.attn * values["attn"]
    )
    return LossReport(
        mel_loss=values["mel"],
        gate_loss=values["gate"],
        wasserstein_term=values["wasserstein"],
        attn_loss=values["attn"],
        total=total,
        step=step,
    )
