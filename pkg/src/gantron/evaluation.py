"""Classifier-based evaluation of generated mels.

Six style-token groups are synthesized and a small CNN is trained to tell the
groups apart from random 80-frame windows of the generated mels alone. The
same classifier machinery drives the augmentation check, which compares an
emotion classifier trained on real data with one trained on real plus
generated data.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .corpus import EMOTIONS, N_EMOTIONS, StyleToken, split_dataset
from .inference import GroupManifestEntry, read_group_manifest
from .mel_features import MelSpectrogram, read_mel

N_GROUPS = 6
GROUP_MODES = (
    "fixed_noise",
    "strong_label",
    "random_label",
    "fixed_label_random_noise",
    "fixed_noise_random_label",
    "per_file_random_noise",
)
SPEC_SETS = ("labels", "noise", "control", "fixed_label", "fixed_noise")

# Intensity presets for strong-emotion groups.
INTENSITY_RANGE = (0.5, 1.0)
INTENSITY_RANGE_LABELLED = (0.5, 0.8)


@dataclass
class GroupSpec:
    group_id: int
    mode: str
    emotion: Optional[int] = None
    intensity_range: tuple = INTENSITY_RANGE
    noise_dim: int = 0
    noise: Optional[np.ndarray] = None
    labels: Optional[np.ndarray] = None
    speaker_value: Optional[float] = None

    def __post_init__(self):
        if self.mode not in GROUP_MODES:
            raise ValueError(f"unknown group mode {self.mode!r}")

    @property
    def token_mode(self) -> str:
        if self.mode in ("fixed_noise", "per_file_random_noise"):
            return "noise_only"
        if self.mode in ("strong_label", "random_label"):
            return "labels_only"
        return "labels_plus_noise"

    def draw(self, rng: np.random.Generator) -> StyleToken:
        """Draw the style token for one file of this group."""
        parts = []
        if self.speaker_value is not None:
            parts.append(np.array([self.speaker_value], dtype=np.float32))
        if self.mode == "strong_label":
            lab = np.zeros(N_EMOTIONS, dtype=np.float32)
            lab[self.emotion] = rng.uniform(*self.intensity_range)
            parts.append(lab)
        elif self.mode in ("random_label", "fixed_noise_random_label"):
            parts.append(rng.uniform(0.0, 1.0, N_EMOTIONS).astype(np.float32))
        elif self.mode == "fixed_label_random_noise":
            parts.append(np.asarray(self.labels, dtype=np.float32))
        if self.mode in ("fixed_noise", "fixed_noise_random_label"):
            parts.append(np.asarray(self.noise, dtype=np.float32))
        elif self.mode in ("per_file_random_noise", "fixed_label_random_noise"):
            parts.append(rng.uniform(0.0, 1.0, self.noise_dim).astype(np.float32))
        values = np.concatenate(parts) if parts else np.zeros(0, dtype=np.float32)
        return StyleToken(values, mode=self.token_mode, has_speaker=self.speaker_value is not None,
                          noise_dim=self.noise_dim if self.token_mode != "labels_only" else 0)


def build_group_specs(
    mode: str,
    intensity_range=INTENSITY_RANGE,
    noise_dim: int = 0,
    rng: Optional[np.random.Generator] = None,
    speaker_value: Optional[float] = None,
) -> list[GroupSpec]:
    """The six group specifications for one evaluation.

    ``labels``: five strong-emotion groups plus one random-label group.
    ``noise``: one fixed random noise token per group.
    ``control``: fresh noise for every file in every group.
    ``fixed_label`` / ``fixed_noise``: the two ablations of a labels+noise token.
    """
    lo, hi = intensity_range
    if not 0.0 <= lo <= hi <= 1.0:
        raise ValueError(f"intensity range {intensity_range} must lie within [0, 1]")
    if mode not in SPEC_SETS:
        raise ValueError(f"unknown evaluation mode {mode!r}; expected one of {SPEC_SETS}")
    rng = rng if rng is not None else np.random.default_rng(0)
    needs_noise = mode in ("noise", "control", "fixed_label", "fixed_noise")
    if needs_noise and noise_dim <= 0:
        raise ValueError(f"mode {mode!r} needs noise_dim > 0")
    if mode == "labels" and noise_dim:
        raise ValueError("labels mode uses label-only tokens; use fixed_label/fixed_noise for labels+noise")

    common = dict(intensity_range=(lo, hi), speaker_value=speaker_value)
    specs = []
    for g in range(N_GROUPS):
        if mode == "labels":
            specs.append(GroupSpec(g, "strong_label", emotion=g, **common) if g < N_EMOTIONS
                         else GroupSpec(g, "random_label", **common))
        elif mode == "noise":
            specs.append(GroupSpec(g, "fixed_noise", noise_dim=noise_dim,
                                   noise=rng.uniform(0, 1, noise_dim).astype(np.float32), **common))
        elif mode == "control":
            specs.append(GroupSpec(g, "per_file_random_noise", noise_dim=noise_dim, **common))
        elif mode == "fixed_label":
            if g < N_EMOTIONS:
                labels = np.zeros(N_EMOTIONS, dtype=np.float32)
                labels[g] = rng.uniform(lo, hi)
            else:
                labels = rng.uniform(0, 1, N_EMOTIONS).astype(np.float32)
            specs.append(GroupSpec(g, "fixed_label_random_noise", noise_dim=noise_dim, labels=labels, **common))
        else:
            specs.append(GroupSpec(g, "fixed_noise_random_label", noise_dim=noise_dim,
                                   noise=rng.uniform(0, 1, noise_dim).astype(np.float32), **common))
    return specs


# -- windows ---------------------------------------------------------------

def window_start(n_frames: int, rng: np.random.Generator, width: int = 80) -> int:
    if n_frames < 1:
        raise ValueError("cannot take a window from an empty mel")
    return int(rng.integers(0, max(0, n_frames - width) + 1))


def sample_classifier_window(mel, rng: np.random.Generator, width: int = 80) -> np.ndarray:
    """A random ``[n_mels, width]`` slice; shorter mels are padded by repeating the last frame."""
    data = mel.data if isinstance(mel, MelSpectrogram) else np.asarray(mel)
    if data.ndim != 2 or data.shape[1] == 0:
        raise ValueError("cannot take a window from an empty mel")
    if data.shape[1] < width:
        data = np.concatenate([data, np.repeat(data[:, -1:], width - data.shape[1], axis=1)], axis=1)
    start = window_start(data.shape[1], rng, width)
    return data[:, start:start + width]


# -- classifier ------------------------------------------------------------

@dataclass(frozen=True)
class ClassifierConfig:
    window: int = 80
    channels: tuple = (8, 16, 32)
    epochs: int = 15
    batch_size: int = 64
    lr: float = 1e-3


class WindowClassifier(nn.Module):
    """Three ``Conv2d + BatchNorm + ReLU + MaxPool`` blocks and a pooled linear head."""

    def __init__(self, n_classes: int, channels=(8, 16, 32)):
        super().__init__()
        blocks, prev = [], 1
        for ch in channels:
            blocks += [nn.Conv2d(prev, ch, 3, padding=1), nn.BatchNorm2d(ch), nn.ReLU(), nn.MaxPool2d(2, ceil_mode=True)]
            prev = ch
        self.features = nn.Sequential(*blocks)
        self.head = nn.Linear(prev, n_classes)

    def forward(self, x):
        # x: [B, n_mels, frames]
        h = self.features(x[:, None])
        return self.head(h.mean(dim=(2, 3)))


@dataclass
class EvalReport:
    accuracy: float
    confusion: list
    precision: list
    recall: list
    n_train: int
    n_test: int
    seed: int
    class_names: list
    history: list = field(default_factory=list)  # per-epoch {"epoch", "train_acc", "val_acc"}

    def to_dict(self) -> dict:
        return asdict(self)

    def save(self, out_dir, stem: str = "report") -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{stem}.json").write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")
        with (out / f"{stem}_confusion.csv").open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["true\\pred", *self.class_names])
            for name, row in zip(self.class_names, self.confusion):
                w.writerow([name, *row])
        with (out / f"{stem}_history.csv").open("w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["epoch", "train_acc", "val_acc"])
            w.writeheader()
            w.writerows(self.history)


def _stack_windows(mels, rng, width):
    return np.stack([sample_classifier_window(m, rng, width) for m in mels]).astype(np.float32)


def _predict(model, mels, rng, width, mean, std, batch_size=256):
    model.eval()
    preds = []
    with torch.no_grad():
        for i in range(0, len(mels), batch_size):
            x = (_stack_windows(mels[i:i + batch_size], rng, width) - mean) / std
            preds.append(model(torch.from_numpy(x)).argmax(1).numpy())
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def classify(
    train_mels: Sequence,
    train_labels: Sequence[int],
    test_mels: Sequence,
    test_labels: Sequence[int],
    n_classes: int,
    class_names: Optional[Sequence[str]] = None,
    val_mels: Sequence = (),
    val_labels: Sequence[int] = (),
    config: ClassifierConfig = ClassifierConfig(),
    seed: int = 0,
) -> EvalReport:
    """Train a window classifier and report test metrics.

    Every training epoch and every prediction uses a freshly sampled window.
    Inputs are mels only; nothing about how they were generated is visible.
    """
    if not train_mels or not test_mels:
        raise ValueError("need non-empty train and test sets")
    train_labels = np.asarray(train_labels, dtype=np.int64)
    test_labels = np.asarray(test_labels, dtype=np.int64)
    rng = np.random.default_rng(seed)
    all_train = np.concatenate([np.asarray(m.data if isinstance(m, MelSpectrogram) else m).ravel() for m in train_mels])
    mean, std = np.float32(all_train.mean()), np.float32(all_train.std() + 1e-6)

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = WindowClassifier(n_classes, config.channels)
        opt = torch.optim.Adam(model.parameters(), lr=config.lr)
        history = []
        for epoch in range(config.epochs):
            model.train()
            order = rng.permutation(len(train_mels))
            correct = 0
            for i in range(0, len(order), config.batch_size):
                idx = order[i:i + config.batch_size]
                if len(idx) < 2:
                    continue  # BatchNorm needs more than one sample
                x = (_stack_windows([train_mels[j] for j in idx], rng, config.window) - mean) / std
                y = torch.from_numpy(train_labels[idx])
                logits = model(torch.from_numpy(x))
                loss = F.cross_entropy(logits, y)
                opt.zero_grad()
                loss.backward()
                opt.step()
                correct += int((logits.argmax(1) == y).sum())
            entry = {"epoch": epoch + 1, "train_acc": correct / len(order), "val_acc": None}
            if len(val_mels):
                vp = _predict(model, list(val_mels), rng, config.window, mean, std)
                entry["val_acc"] = float((vp == np.asarray(val_labels)).mean())
            history.append(entry)
        preds = _predict(model, list(test_mels), rng, config.window, mean, std)

    confusion = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(confusion, (test_labels, preds), 1)
    tp = np.diag(confusion).astype(float)
    with np.errstate(invalid="ignore", divide="ignore"):
        precision = np.where(confusion.sum(0) > 0, tp / confusion.sum(0), 0.0)
        recall = np.where(confusion.sum(1) > 0, tp / confusion.sum(1), 0.0)
    names = list(class_names) if class_names is not None else [str(i) for i in range(n_classes)]
    return EvalReport(
        accuracy=float(tp.sum() / len(test_labels)),
        confusion=confusion.tolist(),
        precision=precision.tolist(),
        recall=recall.tolist(),
        n_train=len(train_mels),
        n_test=len(test_labels),
        seed=seed,
        class_names=names,
        history=history,
    )


def _load_mels(entries):
    return [e.load_mel() if hasattr(e, "load_mel") else read_mel(e.mel_path) for e in entries]


def run_group_classification(
    manifest,
    split_ratios=(0.85, 0.05, 0.10),
    config: ClassifierConfig = ClassifierConfig(),
    seed: int = 0,
    n_groups: int = N_GROUPS,
    mels: Optional[dict] = None,
) -> EvalReport:
    """Separate generated files into their style-token groups.

    ``manifest`` is a group-manifest path or a list of entries. The split is
    stratified: each group is divided with ``split_ratios`` on its own.
    ``mels`` optionally maps entry id to an already loaded mel.
    """
    entries = read_group_manifest(manifest) if isinstance(manifest, (str, Path)) else list(manifest)
    by_group: dict[int, list[GroupManifestEntry]] = {}
    for e in entries:
        by_group.setdefault(int(e.group_id), []).append(e)
    missing = sorted(set(range(n_groups)) - set(by_group))
    if missing:
        raise ValueError(f"groups {missing} are absent from the manifest")
    splits = ([], [], [])
    for g in range(n_groups):
        parts = split_dataset(by_group[g], split_ratios, seed=seed + 1000 * (g + 1))
        for acc, part in zip(splits, parts):
            acc.extend(part)

    def materialize(part):
        loaded = [mels[e.id] for e in part] if mels is not None else _load_mels(part)
        return loaded, [int(e.group_id) for e in part]

    (tr_m, tr_y), (va_m, va_y), (te_m, te_y) = (materialize(p) for p in splits)
    return classify(tr_m, tr_y, te_m, te_y, n_groups, [f"group_{g}" for g in range(n_groups)],
                    va_m, va_y, config, seed)


@dataclass
class AugmentationReport:
    baseline: EvalReport
    augmented: EvalReport
    n_generated: int

    @property
    def difference(self) -> float:
        return self.augmented.accuracy - self.baseline.accuracy

    def to_dict(self) -> dict:
        return {"baseline": self.baseline.to_dict(), "augmented": self.augmented.to_dict(),
                "difference": self.difference, "n_generated": self.n_generated}


def dominant_emotion(labels, emotions: Sequence[str] = EMOTIONS) -> Optional[int]:
    """Index into ``emotions`` of the strongest label, or None if no shared emotion is positive."""
    labels = np.asarray(labels, dtype=np.float64)
    idx = [EMOTIONS.index(e) for e in emotions]
    sub = labels[idx]
    if sub.max(initial=0.0) <= 0:
        return None
    return int(np.argmax(sub))


def augmentation_check(
    real: Sequence,
    generated: Sequence,
    emotions: Sequence[str] = EMOTIONS,
    seed: int = 0,
    split_ratios=(0.85, 0.05, 0.10),
    config: ClassifierConfig = ClassifierConfig(),
    real_mels: Optional[dict] = None,
    generated_mels: Optional[dict] = None,
) -> AugmentationReport:
    """Emotion classification on real data, with and without generated data added.

    ``real`` holds :class:`UtteranceRecord` items (or manifests of them),
    labelled by their dominant emotion; records without one of ``emotions``
    as dominant emotion are dropped. ``generated`` holds group-manifest
    entries labelled by the dominant emotion of their style token. Both runs
    share the seed and are tested on the same held-out real split.
    """
    for e in emotions:
        if e not in EMOTIONS:
            raise ValueError(f"unsupported emotion {e!r}")
    emotions = list(emotions)
    real_items = []
    for rec in real:
        lab = dominant_emotion(rec.emotion_labels, emotions) if rec.emotion_labels is not None else None
        if lab is not None:
            real_items.append((rec, lab))
    present = {lab for _, lab in real_items}
    if present != set(range(len(emotions))):
        missing = [emotions[i] for i in range(len(emotions)) if i not in present]
        raise ValueError(f"real data lacks emotions {missing} after filtering")

    gen_items = []
    for entry in generated:
        emo = entry.emotions
        if emo is None:
            raise ValueError(f"generated file {entry.id} has no emotion block in its style token")
        lab = dominant_emotion(emo, emotions)
        if lab is not None:
            gen_items.append((entry, lab))

    train, val, test = split_dataset(real_items, split_ratios, seed=seed)

    def mels_of(items, cache):
        if cache is not None:
            return [cache[it.id] for it, _ in items]
        return [read_mel(it.mel_path) for it, _ in items]

    tr_m, va_m, te_m = mels_of(train, real_mels), mels_of(val, real_mels), mels_of(test, real_mels)
    tr_y, va_y, te_y = ([lab for _, lab in part] for part in (train, val, test))
    gen_m = mels_of(gen_items, generated_mels)
    gen_y = [lab for _, lab in gen_items]

    baseline = classify(tr_m, tr_y, te_m, te_y, len(emotions), emotions, va_m, va_y, config, seed)
    augmented = classify(tr_m + gen_m, tr_y + gen_y, te_m, te_y, len(emotions), emotions,
                         va_m, va_y, config, seed)
    return AugmentationReport(baseline, augmented, len(gen_items))


def save_accuracy_curves(reports: dict, out_dir, stem: str = "accuracy") -> None:
    """Write per-epoch validation accuracy of several reports as CSV and PNG."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with (out / f"{stem}.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["run", "epoch", "train_acc", "val_acc"])
        for name, rep in reports.items():
            for h in rep.history:
                w.writerow([name, h["epoch"], h["train_acc"], h["val_acc"]])
    fig, ax = plt.subplots(figsize=(6, 4))
    for name, rep in reports.items():
        epochs = [h["epoch"] for h in rep.history]
        acc = [h["val_acc"] if h["val_acc"] is not None else h["train_acc"] for h in rep.history]
        ax.plot(epochs, acc, label=name)
    ax.set_xlabel("epoch")
    ax.set_ylabel("accuracy")
    ax.set_ylim(0, 1)
    ax.legend()
    fig.tight_layout()
    fig.savefig(out / f"{stem}.png")
    plt.close(fig)
