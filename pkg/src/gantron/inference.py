"""Free-running synthesis and bulk generation of style-token groups."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .corpus import Charset, StyleToken
from .generator_net import Generator
from .mel_features import MelSpectrogram, read_mel, write_mel

COMPLETED = "completed"
MAX_STEPS_REACHED = "max_steps_reached"


@dataclass
class SynthesisResult:
    mel: MelSpectrogram
    status: str
    n_steps: int
    style: StyleToken
    alignment: np.ndarray  # [n_steps, n_text]

    @property
    def completed(self) -> bool:
        return self.status == COMPLETED


def synthesize(
    text,
    style: StyleToken,
    model: Generator,
    max_steps: Optional[int] = None,
    gate_threshold: Optional[float] = None,
    seed: Optional[int] = 0,
    charset: Optional[Charset] = None,
    sample_rate: int = 22050,
    hop_length: int = 256,
) -> SynthesisResult:
    """Decode until ``sigmoid(gate) > gate_threshold`` or ``max_steps`` frames.

    ``text`` is a string (encoded with ``charset``) or a sequence of symbol ids.
    Pre-net dropout stays on, driven by a generator seeded with ``seed``; pass
    ``seed=None`` to disable it.
    """
    cfg = model.cfg
    max_steps = cfg.max_decoder_steps if max_steps is None else max_steps
    gate_threshold = cfg.gate_threshold if gate_threshold is None else gate_threshold
    if max_steps < 1:
        raise ValueError("max_steps must be >= 1")
    if isinstance(text, str):
        if not text.strip():
            raise ValueError("cannot synthesize empty text")
        symbols = (charset or Charset()).encode(text)
    else:
        symbols = list(text)
        if not symbols:
            raise ValueError("cannot synthesize empty text")

    dtype = next(model.parameters()).dtype
    gen = torch.Generator().manual_seed(seed) if seed is not None else None
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            ids = torch.tensor([symbols], dtype=torch.long)
            lengths = torch.tensor([len(symbols)])
            style_t = torch.as_tensor(np.asarray(style.values), dtype=dtype)[None]
            state = model.init_decoder_state(ids, lengths, style_t)
            frame = torch.zeros(1, cfg.n_mels, dtype=dtype)
            frames, aligns = [], []
            status = MAX_STEPS_REACHED
            for _ in range(max_steps):
                frame, gate, weights, state = model.decode_step(frame, state, gen)
                frames.append(frame)
                aligns.append(weights)
                if torch.sigmoid(gate).item() > gate_threshold:
                    status = COMPLETED
                    break
            mel = torch.stack(frames, dim=2)
            mel = mel + model.postnet(mel)
    finally:
        model.train(was_training)
    return SynthesisResult(
        mel=MelSpectrogram(mel[0].float().numpy(), sample_rate=sample_rate, hop_length=hop_length),
        status=status,
        n_steps=len(frames),
        style=style,
        alignment=torch.cat(aligns, 0).float().numpy(),
    )


@dataclass
class GroupManifestEntry:
    id: str
    group_id: int
    style: list
    status: str
    n_steps: int
    mel_path: str
    text: str = ""
    emotion_offset: Optional[int] = None

    def to_json(self) -> str:
        return json.dumps(self.__dict__, sort_keys=True)

    @property
    def emotions(self) -> Optional[np.ndarray]:
        if self.emotion_offset is None:
            return None
        return np.asarray(self.style[self.emotion_offset:self.emotion_offset + 5], dtype=np.float32)

    def load_mel(self) -> MelSpectrogram:
        return read_mel(self.mel_path)


def read_group_manifest(path) -> list[GroupManifestEntry]:
    path = Path(path)
    entries = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            entry = GroupManifestEntry(**obj)
        except (json.JSONDecodeError, TypeError) as exc:
            raise ValueError(f"{path}:{lineno}: malformed group manifest entry ({exc})") from None
        if not Path(entry.mel_path).is_absolute():
            entry.mel_path = str(path.parent / entry.mel_path)
        entries.append(entry)
    return entries


def write_group_manifest(entries: Sequence[GroupManifestEntry], path, relative_to=None) -> None:
    path = Path(path)
    base = Path(relative_to) if relative_to is not None else path.parent
    lines = []
    for e in entries:
        d = dict(e.__dict__)
        try:
            d["mel_path"] = str(Path(e.mel_path).resolve().relative_to(base.resolve()))
        except ValueError:
            pass
        lines.append(json.dumps(d, sort_keys=True))
    path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def generate_group(
    texts: Sequence,
    group_spec,
    model: Generator,
    n_files: int,
    rng: np.random.Generator,
    out_dir=None,
    base_seed: int = 0,
    max_steps: Optional[int] = None,
    gate_threshold: Optional[float] = None,
    charset: Optional[Charset] = None,
    sample_rate: int = 22050,
    hop_length: int = 256,
) -> tuple[list[SynthesisResult], float]:
    """Synthesize ``n_files`` utterances whose style tokens are drawn from ``group_spec``.

    Texts are used round-robin. File ``i`` uses pre-net seed ``base_seed + i``.
    With ``out_dir`` the mels are written as ``.mel`` containers next to a
    ``group_<id>.jsonl`` manifest.
    """
    if n_files <= 0:
        raise ValueError("n_files must be positive")
    if not texts:
        raise ValueError("need at least one text")
    results, entries = [], []
    group_dir = None
    if out_dir is not None:
        group_dir = Path(out_dir) / f"group_{group_spec.group_id}"
        group_dir.mkdir(parents=True, exist_ok=True)
    for i in range(n_files):
        text = texts[i % len(texts)]
        token = group_spec.draw(rng)
        res = synthesize(text, token, model, max_steps, gate_threshold, seed=base_seed + i,
                         charset=charset, sample_rate=sample_rate, hop_length=hop_length)
        results.append(res)
        if group_dir is not None:
            file_id = f"g{group_spec.group_id}_{i:05d}"
            mel_path = group_dir / f"{file_id}.mel"
            write_mel(res.mel, mel_path)
            sl = token.emotion_slice
            entries.append(GroupManifestEntry(
                id=file_id, group_id=group_spec.group_id,
                style=[float(v) for v in token.values], status=res.status, n_steps=res.n_steps,
                mel_path=str(mel_path), text=text if isinstance(text, str) else " ".join(map(str, text)),
                emotion_offset=None if sl is None else sl.start,
            ))
    if group_dir is not None:
        write_group_manifest(entries, Path(out_dir) / f"group_{group_spec.group_id}.jsonl", relative_to=out_dir)
    failures = sum(r.status == MAX_STEPS_REACHED for r in results)
    return results, failures / n_files


def failure_rate(entries: Sequence[GroupManifestEntry]) -> float:
    if not entries:
        return math.nan
    return sum(e.status == MAX_STEPS_REACHED for e in entries) / len(entries)
