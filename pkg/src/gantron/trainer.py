"""Adversarial training: one critic update, then ``gen_updates_per_disc`` generator updates.

The critic is a Wasserstein critic kept bounded by weight clipping. All
randomness (batch sampling, window overlaps, style noise, dropout) flows from
the RNG state stored in :class:`TrainState`, so a run resumed from a
checkpoint reproduces the uninterrupted run exactly.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .corpus import PaddedBatch, StyleToken, build_style_token, collate_batch, style_token_length
from .discriminator_net import Discriminator, DiscriminatorConfig, build_discriminator, score_batch
from .generator_net import Generator, GeneratorConfig, build_generator
from .losses import (
    GuidedAttentionConfig,
    LossReport,
    LossWeights,
    gate_loss,
    generator_total_loss,
    guided_attention_loss,
    mel_loss,
    warmup_active,
    wasserstein_critic_loss,
    wasserstein_generator_term,
)
from .mel_features import MelSpectrogram

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"GTRN"
CHECKPOINT_VERSION = 1
_CKPT_HEADER = struct.Struct("<4sI32sQ")


@dataclass(frozen=True)
class TrainConfig:
    gen_updates_per_disc: int = 2
    clip_c: float = 0.01
    gen_lr: float = 1e-3
    disc_lr: float = 1e-4
    gen_grad_clip: float = 1.0
    batch_size: int = 8
    max_steps: int = 1000
    val_interval: int = 100
    checkpoint_interval: int = 1000
    seed: int = 0
    attn_g: float = 0.2
    attn_warmup_steps: int = 5000
    attn_enabled: bool = True
    weight_mel: float = 1.0
    weight_gate: float = 1.0
    weight_wasserstein: float = 1.0
    weight_attn: float = 1.0

    def __post_init__(self):
        if self.gen_updates_per_disc < 1:
            raise ValueError("gen_updates_per_disc must be >= 1")
        if self.clip_c <= 0:
            raise ValueError("clip_c must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    @property
    def attention(self) -> GuidedAttentionConfig:
        return GuidedAttentionConfig(self.attn_g, self.attn_warmup_steps, self.attn_enabled)

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.weight_mel, self.weight_gate, self.weight_wasserstein, self.weight_attn)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainState:
    generator: Generator
    discriminator: Discriminator
    gen_optimizer: torch.optim.Optimizer
    disc_optimizer: torch.optim.Optimizer
    config: TrainConfig
    rng: np.random.Generator
    torch_rng_state: torch.Tensor
    global_step: int = 0
    disc_step: int = 0
    meta: dict = field(default_factory=dict)  # JSON-serializable run details kept in checkpoints

    @property
    def gen_config(self) -> GeneratorConfig:
        return self.generator.cfg

    @property
    def disc_config(self) -> DiscriminatorConfig:
        return self.discriminator.config

    def config_snapshot(self) -> dict:
        return {
            "train": asdict(self.config),
            "generator": self.gen_config.to_dict(),
            "discriminator": self.disc_config.to_dict(),
        }


def _optimizers(gen: nn.Module, disc: nn.Module, cfg: TrainConfig):
    return (
        torch.optim.Adam(gen.parameters(), lr=cfg.gen_lr),
        torch.optim.Adam(disc.parameters(), lr=cfg.disc_lr),
    )


def init_train_state(gen_config: GeneratorConfig, disc_config: DiscriminatorConfig,
                     config: TrainConfig = TrainConfig()) -> TrainState:
    if gen_config.n_mels != disc_config.n_mels:
        raise ValueError("generator and discriminator disagree on n_mels")
    gen = build_generator(gen_config, seed=config.seed)
    disc = build_discriminator(disc_config, seed=config.seed + 1)
    clip_weights(disc, config.clip_c)
    gen_opt, disc_opt = _optimizers(gen, disc, config)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed + 2)
        torch_state = torch.get_rng_state()
    return TrainState(gen, disc, gen_opt, disc_opt, config,
                      np.random.default_rng(config.seed), torch_state)


# -- data ------------------------------------------------------------------

@dataclass
class Example:
    """One training utterance before its style token is drawn."""

    symbols: list
    mel: MelSpectrogram
    labels: Optional[np.ndarray] = None
    speaker: Optional[tuple] = None  # (index, n_speakers)


@dataclass(frozen=True)
class StyleSpec:
    mode: str = "labels_only"
    has_speaker: bool = False
    noise_dim: int = 0

    @property
    def length(self) -> int:
        return style_token_length(self.mode, self.has_speaker, self.noise_dim)

    def token_for(self, ex: Example, rng: np.random.Generator) -> StyleToken:
        labels = None if self.mode == "noise_only" else ex.labels
        speaker = (ex.speaker or (0, 1)) if self.has_speaker else None
        return build_style_token(self.mode, labels, speaker, self.noise_dim, rng)


def make_batch(examples: Sequence[Example], spec: StyleSpec, rng: np.random.Generator) -> PaddedBatch:
    return collate_batch([(ex.symbols, ex.mel, spec.token_for(ex, rng)) for ex in examples])


def sample_batch(examples: Sequence[Example], spec: StyleSpec, batch_size: int,
                 rng: np.random.Generator) -> PaddedBatch:
    size = min(batch_size, len(examples))
    idx = rng.choice(len(examples), size=size, replace=False)
    return make_batch([examples[i] for i in sorted(idx)], spec, rng)


# -- updates ---------------------------------------------------------------

def clip_weights(disc: nn.Module, c: float) -> nn.Module:
    if c <= 0:
        raise ValueError("clip constant must be positive")
    with torch.no_grad():
        for p in disc.parameters():
            p.clamp_(-c, c)
    return disc


def _generator_losses(state: TrainState, batch: PaddedBatch, step: int) -> LossReport:
    cfg = state.config
    out = state.generator(batch)
    mask = batch.mel_mask
    components = {
        "mel": mel_loss(out.mel_output, out.mel_postnet_output, batch.mels, mask),
        "gate": gate_loss(out.gate_out, batch.gate_target, mask),
        "wasserstein": wasserstein_generator_term(
            score_batch(state.discriminator, out.mel_postnet_output, batch.mel_lengths, state.rng)
        ),
        "attn": 0.0,
    }
    if warmup_active(step, cfg.attention):
        components["attn"] = guided_attention_loss(
            out.alignments, batch.text_lengths, batch.mel_lengths, cfg.attn_g
        )
    return generator_total_loss(components, step, cfg.attention, cfg.weights)


def _critic_update(state: TrainState, batch: PaddedBatch) -> LossReport:
    gen, disc = state.generator, state.discriminator
    gen.train()
    disc.train()
    with torch.no_grad():
        fake = gen(batch).mel_postnet_output
    real_scores = score_batch(disc, batch.mels, batch.mel_lengths, state.rng)
    fake_scores = score_batch(disc, fake, batch.mel_lengths, state.rng)
    loss = wasserstein_critic_loss(real_scores, fake_scores)
    if not torch.isfinite(loss):
        raise FloatingPointError(f"non-finite critic loss at disc step {state.disc_step}")
    state.disc_optimizer.zero_grad(set_to_none=True)
    loss.backward()
    state.disc_optimizer.step()
    clip_weights(disc, state.config.clip_c)
    state.disc_step += 1
    value = float(loss.detach())
    return LossReport(wasserstein_term=value, total=value, step=state.global_step, kind="critic")


def _generator_update(state: TrainState, batch: PaddedBatch) -> LossReport:
    state.generator.train()
    state.discriminator.train()
    for p in state.discriminator.parameters():
        p.requires_grad_(False)
    try:
        report = _generator_losses(state, batch, state.global_step)
    finally:
        for p in state.discriminator.parameters():
            p.requires_grad_(True)
    state.gen_optimizer.zero_grad(set_to_none=True)
    report.total.backward()
    if state.config.gen_grad_clip > 0:
        nn.utils.clip_grad_norm_(state.generator.parameters(), state.config.gen_grad_clip)
    state.gen_optimizer.step()
    state.global_step += 1
    return report.detached()


def _snapshot(state: TrainState) -> dict:
    return copy.deepcopy({
        "gen": state.generator.state_dict(),
        "disc": state.discriminator.state_dict(),
        "gen_opt": state.gen_optimizer.state_dict(),
        "disc_opt": state.disc_optimizer.state_dict(),
        "rng": state.rng.bit_generator.state,
        "torch_rng": state.torch_rng_state,
        "steps": (state.global_step, state.disc_step),
    })


def _restore(state: TrainState, snap: dict) -> None:
    state.generator.load_state_dict(snap["gen"])
    state.discriminator.load_state_dict(snap["disc"])
    state.gen_optimizer.load_state_dict(snap["gen_opt"])
    state.disc_optimizer.load_state_dict(snap["disc_opt"])
    state.rng.bit_generator.state = snap["rng"]
    state.torch_rng_state = snap["torch_rng"]
    state.global_step, state.disc_step = snap["steps"]


def train_cycle(state: TrainState, disc_batch: PaddedBatch,
                gen_batches: Sequence[PaddedBatch]) -> tuple[TrainState, list[LossReport]]:
    """Run one critic update followed by the generator updates.

    Returns the (mutated) state and one report per update, critic first. On a
    non-finite loss the state is rolled back to its value before the cycle and
    ``FloatingPointError`` is raised.
    """
    if len(gen_batches) != state.config.gen_updates_per_disc:
        raise ValueError(
            f"expected {state.config.gen_updates_per_disc} generator batches, got {len(gen_batches)}"
        )
    snap = _snapshot(state)
    torch.set_rng_state(state.torch_rng_state)
    try:
        reports = [_critic_update(state, disc_batch)]
        for batch in gen_batches:
            reports.append(_generator_update(state, batch))
    except FloatingPointError:
        _restore(state, snap)
        raise
    state.torch_rng_state = torch.get_rng_state()
    return state, reports


def validate(state: TrainState, batches: Sequence[PaddedBatch]) -> LossReport:
    """Aggregate losses over ``batches`` with dropout off and no parameter updates."""
    batches = list(batches)
    if not batches:
        raise ValueError("validation set is empty")
    gen, disc = state.generator, state.discriminator
    modes = gen.training, disc.training
    gen.eval()
    disc.eval()
    rng = np.random.default_rng(state.config.seed + 7919)
    sums = dict(post=0.0, pre=0.0, mel_n=0.0, gate=0.0, gate_n=0.0, attn=0.0, items=0, fake=0.0)
    try:
        with torch.no_grad():
            for batch in batches:
                out = gen(batch)
                mask = batch.mel_mask
                full = mask[:, None, :].expand_as(batch.mels).to(batch.mels.dtype)
                sums["post"] += float(((out.mel_postnet_output - batch.mels) ** 2 * full).sum())
                sums["pre"] += float(((out.mel_output - batch.mels) ** 2 * full).sum())
                sums["mel_n"] += float(full.sum())
                bce = F.binary_cross_entropy_with_logits(out.gate_out, batch.gate_target, reduction="none")
                sums["gate"] += float((bce * mask).sum())
                sums["gate_n"] += float(mask.sum())
                attn = guided_attention_loss(out.alignments, batch.text_lengths, batch.mel_lengths,
                                             state.config.attn_g)
                sums["attn"] += float(attn) * len(batch)
                scores = score_batch(disc, out.mel_postnet_output, batch.mel_lengths, rng)
                sums["fake"] += float(scores.sum())
                sums["items"] += len(batch)
    finally:
        gen.train(modes[0])
        disc.train(modes[1])
    components = {
        "mel": sums["post"] / sums["mel_n"] + sums["pre"] / sums["mel_n"],
        "gate": sums["gate"] / sums["gate_n"],
        "wasserstein": -sums["fake"] / sums["items"],
        "attn": sums["attn"] / sums["items"],
    }
    report = generator_total_loss(components, state.global_step, state.config.attention, state.config.weights)
    report.kind = "validation"
    return report


# -- checkpoints -----------------------------------------------------------

def _canonical(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def config_digest(snapshot: dict) -> bytes:
    return hashlib.sha256(_canonical(snapshot)).digest()


def _flatten_optimizer(prefix: str, opt_state: dict, blobs: dict) -> dict:
    meta = {"param_groups": opt_state["param_groups"], "state": {}}
    for idx, entry in opt_state["state"].items():
        keys = {}
        for key, value in entry.items():
            if isinstance(value, torch.Tensor):
                blobs[f"{prefix}/{idx}/{key}"] = value
                keys[key] = "tensor"
            else:
                keys[key] = value
        meta["state"][str(idx)] = keys
    return meta


def _unflatten_optimizer(prefix: str, meta: dict, blobs: dict) -> dict:
    state = {}
    for idx, keys in meta["state"].items():
        state[int(idx)] = {
            key: (blobs[f"{prefix}/{idx}/{key}"] if value == "tensor" else value)
            for key, value in keys.items()
        }
    return {"state": state, "param_groups": meta["param_groups"]}


def checkpoint_bytes(state: TrainState) -> bytes:
    blobs: dict[str, torch.Tensor] = {}
    for name, t in state.generator.state_dict().items():
        blobs[f"generator/{name}"] = t
    for name, t in state.discriminator.state_dict().items():
        blobs[f"discriminator/{name}"] = t
    gen_opt = _flatten_optimizer("gen_opt", state.gen_optimizer.state_dict(), blobs)
    disc_opt = _flatten_optimizer("disc_opt", state.disc_optimizer.state_dict(), blobs)
    blobs["torch_rng"] = state.torch_rng_state

    entries, payload, offset = [], [], 0
    for name in sorted(blobs):
        t = blobs[name].detach().cpu().contiguous()
        raw = t.numpy().tobytes()
        entries.append({"name": name, "dtype": str(t.dtype).replace("torch.", ""),
                        "shape": list(t.shape), "offset": offset, "nbytes": len(raw)})
        payload.append(raw)
        offset += len(raw)
    snapshot = state.config_snapshot()
    header = {
        "config": snapshot,
        "global_step": state.global_step,
        "disc_step": state.disc_step,
        "meta": state.meta,
        "numpy_rng": state.rng.bit_generator.state,
        "gen_optimizer": gen_opt,
        "disc_optimizer": disc_opt,
        "blobs": entries,
    }
    head = _canonical(header)
    prefix = _CKPT_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, config_digest(snapshot), len(head))
    return prefix + head + b"".join(payload)


def save_checkpoint(state: TrainState, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(checkpoint_bytes(state))
    tmp.replace(path)


def state_from_bytes(blob: bytes) -> TrainState:
    if len(blob) < _CKPT_HEADER.size:
        raise ValueError("truncated checkpoint")
    magic, version, digest, head_len = _CKPT_HEADER.unpack_from(blob)
    if magic != CHECKPOINT_MAGIC:
        raise ValueError(f"not a checkpoint (magic {magic!r})")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"checkpoint format version {version} is not supported (expected {CHECKPOINT_VERSION})")
    start = _CKPT_HEADER.size
    header = json.loads(blob[start:start + head_len])
    if config_digest(header["config"]) != digest:
        raise ValueError("checkpoint config digest mismatch")
    data_start = start + head_len
    blobs = {}
    for e in header["blobs"]:
        raw = blob[data_start + e["offset"]: data_start + e["offset"] + e["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
        blobs[e["name"]] = torch.from_numpy(arr)

    cfg = header["config"]
    train_cfg = TrainConfig.from_dict(cfg["train"])
    gen = Generator(GeneratorConfig.from_dict(cfg["generator"]))
    disc = build_discriminator(DiscriminatorConfig.from_dict(cfg["discriminator"]))
    gen.load_state_dict({k[len("generator/"):]: v for k, v in blobs.items() if k.startswith("generator/")})
    disc.load_state_dict({k[len("discriminator/"):]: v for k, v in blobs.items() if k.startswith("discriminator/")})
    gen_opt, disc_opt = _optimizers(gen, disc, train_cfg)
    gen_opt.load_state_dict(_unflatten_optimizer("gen_opt", header["gen_optimizer"], blobs))
    disc_opt.load_state_dict(_unflatten_optimizer("disc_opt", header["disc_optimizer"], blobs))
    rng = np.random.default_rng()
    rng.bit_generator.state = header["numpy_rng"]
    return TrainState(gen, disc, gen_opt, disc_opt, train_cfg, rng, blobs["torch_rng"],
                      global_step=header["global_step"], disc_step=header["disc_step"],
                      meta=header.get("meta", {}))


def load_checkpoint(path) -> TrainState:
    return state_from_bytes(Path(path).read_bytes())


# -- loop ------------------------------------------------------------------

class MetricsLog:
    """Append-only tab-separated metrics file."""

    def __init__(self, path):
        self.path = Path(path) if path is not None else None

    def write(self, report: LossReport, phase: str) -> None:
        if self.path is None:
            return
        with self.path.open("a", encoding="utf-8") as fh:
            fh.write(report.log_line(phase) + "\n")


def fit(
    state: TrainState,
    train_examples: Sequence[Example],
    style: StyleSpec,
    val_batches: Optional[Sequence[PaddedBatch]] = None,
    max_steps: Optional[int] = None,
    metrics_path=None,
    checkpoint_path=None,
    on_cycle: Optional[Callable[[TrainState, list], bool]] = None,
) -> TrainState:
    """Train until ``global_step >= max_steps`` (or ``on_cycle`` returns True).

    Validation runs every ``val_interval`` generator steps and a checkpoint is
    written every ``checkpoint_interval`` steps and at the end.
    """
    cfg = state.config
    max_steps = cfg.max_steps if max_steps is None else max_steps
    metrics = MetricsLog(metrics_path)
    ratio = cfg.gen_updates_per_disc
    if not train_examples:
        raise ValueError("no training examples")
    if style.length != state.gen_config.style_dim:
        raise ValueError(f"style spec length {style.length} != generator style_dim {state.gen_config.style_dim}")

    while state.global_step < max_steps:
        disc_batch = sample_batch(train_examples, style, cfg.batch_size, state.rng)
        gen_batches = [sample_batch(train_examples, style, cfg.batch_size, state.rng) for _ in range(ratio)]
        before = state.global_step
        _, reports = train_cycle(state, disc_batch, gen_batches)
        for r in reports[1:]:
            metrics.write(r, "train")
        crossed = lambda interval: interval > 0 and before // interval != state.global_step // interval  # noqa: E731
        if val_batches and crossed(cfg.val_interval):
            metrics.write(validate(state, val_batches), "val")
        if checkpoint_path is not None and crossed(cfg.checkpoint_interval):
            save_checkpoint(state, checkpoint_path)
        if on_cycle is not None and on_cycle(state, reports):
            break
    if checkpoint_path is not None:
        save_checkpoint(state, checkpoint_path)
    return state
