"""Command-line entry point: ``gantron <subcommand> [flags]``.

Configuration is a flat ``key = value`` file with ``#`` comments. Keys are
dotted (``train.batch_size``, ``generator.attention_dim``, ...). Precedence,
lowest first: built-in defaults, ``run.preset``, the ``GANTRON_SEED``
environment variable (for ``run.seed`` only), the config file, ``--set``
overrides, then dedicated flags such as ``--max-steps``.

Exit status is 0 on success, 1 on a usage or configuration error and 2 when
the command fails at run time.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import shlex
import sys
from dataclasses import MISSING, dataclass, fields
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from . import __version__
from .corpus import (
    EMOTIONS,
    N_EMOTIONS,
    Charset,
    build_style_token,
    parse_manifest,
    split_dataset,
)
from .discriminator_net import DiscriminatorConfig
from .evaluation import (
    SPEC_SETS,
    ClassifierConfig,
    augmentation_check,
    build_group_specs,
    run_group_classification,
    save_accuracy_curves,
)
from .generator_net import GeneratorConfig
from .inference import GroupManifestEntry, failure_rate, generate_group, read_group_manifest, synthesize, write_group_manifest
from .mel_features import MelConfig, read_mel, waveform_to_mel, write_mel
from .trainer import Example, StyleSpec, TrainConfig, fit, init_train_state, load_checkpoint, make_batch

log = logging.getLogger("gantron")


class UsageError(Exception):
    pass


# -- configuration ---------------------------------------------------------

@dataclass(frozen=True)
class Key:
    default: object
    owner: str
    doc: str = ""


# keys filled in from other settings rather than configured directly
_DERIVED = {"generator.n_symbols", "generator.style_dim", "generator.n_mels", "discriminator.n_mels",
            "train.seed"}

RUN_KEYS = {
    "run.seed": Key(0, "cli", "global seed; GANTRON_SEED is used when neither file nor flag sets it"),
    "run.preset": Key("full", "cli", "size preset applied before the config file: full or tiny"),
    "run.model_type": Key("labelled", "cli", "baseline, expressive, labelled or complete"),
    "run.noise_dim": Key(512, "corpus", "noise entries in the style token for noise-carrying variants"),
    "run.speaker": Key(True, "corpus", "prepend a normalized speaker index to the style token"),
    "run.split": Key((0.85, 0.05, 0.10), "corpus", "train, validation and test fractions"),
    "eval.mode": Key("labels", "evaluation", f"group set: one of {', '.join(SPEC_SETS)}"),
    "eval.n_files": Key(100, "evaluation", "files generated per group"),
    "eval.intensity_range": Key((0.5, 1.0), "evaluation", "emotion intensity range of strong-label groups"),
    "eval.emotions": Key(EMOTIONS, "evaluation", "emotions used by augment-check"),
}

SECTIONS = {
    "mel": (MelConfig, "mel_features"),
    "generator": (GeneratorConfig, "generator_net"),
    "discriminator": (DiscriminatorConfig, "discriminator_net"),
    "train": (TrainConfig, "trainer"),
    "classifier": (ClassifierConfig, "evaluation"),
}

PRESETS = {
    "full": {},
    "tiny": {
        **{f"generator.{k}": v for k, v in dict(
            embedding_dim=16, encoder_n_convs=1, encoder_filters=16, encoder_rnn_dim=16,
            prenet_dims=(32, 32), attention_rnn_dim=32, decoder_rnn_dim=32, attention_dim=16,
            location_filters=4, location_kernel_size=7, postnet_n_convs=2, postnet_filters=16,
            max_decoder_steps=200).items()},
        "mel.n_mels": 16,
        "discriminator.window_size": 4,
        "discriminator.max_overlap": 2,
        "discriminator.hidden_dims": (32, 32, 32),
        "discriminator.kernel_size": 3,
        "run.noise_dim": 8,
        "train.batch_size": 4,
        "train.attn_warmup_steps": 500,
    },
}


def config_keys() -> dict:
    """Every accepted key with its default and owning module."""
    keys = dict(RUN_KEYS)
    for section, (cls, owner) in SECTIONS.items():
        for f in fields(cls):
            name = f"{section}.{f.name}"
            if name in _DERIVED:
                continue
            default = f.default if f.default is not MISSING else f.default_factory()
            if section == "discriminator" and f.name == "hidden_dims":
                default = None
            keys[name] = Key(default, owner)
    return dict(sorted(keys.items()))


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ",".join(_format(v) for v in value)
    return str(value)


def _parse_value(key: str, text: str, default):
    text = text.strip()
    try:
        if text.lower() == "none" and (default is None or isinstance(default, tuple)):
            return None
        if isinstance(default, bool):
            if text.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return text.lower() in ("true", "1", "yes")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple) or default is None:
            items = [t.strip() for t in text.split(",") if t.strip()]
            sample = default[0] if default else 0
            if isinstance(sample, str):
                return tuple(items)
            conv = float if isinstance(sample, float) else int
            return tuple(conv(t) for t in items)
        return text
    except ValueError:
        raise UsageError(f"bad value for {key}: {text!r}") from None


def read_config_file(path) -> dict:
    """Parse ``key = value`` lines; values stay strings until merged."""
    out = {}
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        out[key] = value
    return out


class RunConfig(dict):
    """Effective configuration after merging every source."""

    @classmethod
    def build(cls, file_values: Optional[dict] = None, overrides: Optional[dict] = None,
              env: Optional[dict] = None) -> "RunConfig":
        keys = config_keys()
        env = os.environ if env is None else env
        raw = {}
        raw.update(file_values or {})
        raw.update(overrides or {})
        unknown = sorted(set(raw) - set(keys))
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(unknown)}")
        cfg = cls({k: spec.default for k, spec in keys.items()})

        def parsed(key, value):
            return _parse_value(key, value, keys[key].default) if isinstance(value, str) else value

        preset = parsed("run.preset", raw.get("run.preset", "full"))
        if preset not in PRESETS:
            raise UsageError(f"unknown preset {preset!r}; expected one of {sorted(PRESETS)}")
        cfg.update(PRESETS[preset])
        if "GANTRON_SEED" in env:
            cfg["run.seed"] = parsed("run.seed", env["GANTRON_SEED"])
        for key, value in raw.items():
            cfg[key] = parsed(key, value)
        return cfg

    def section(self, name: str) -> dict:
        prefix = name + "."
        return {k[len(prefix):]: v for k, v in self.items() if k.startswith(prefix)}

    def to_text(self) -> str:
        return "".join(f"{k} = {_format(v)}\n" for k, v in sorted(self.items()))


# -- model variants --------------------------------------------------------

@dataclass(frozen=True)
class ModelVariant:
    name: str
    datasets: tuple
    style_mode: str
    placement: str = "decoder"


VARIANTS = {
    "baseline": ModelVariant("baseline", ("lj",), "noise_only"),
    "expressive": ModelVariant("expressive", ("lj", "vesus"), "noise_only"),
    "labelled": ModelVariant("labelled", ("lj", "vesus"), "labels_only"),
    "complete": ModelVariant("complete", ("lj", "vesus"), "labels_plus_noise"),
}


def select_model_variant(name: str) -> ModelVariant:
    """Datasets, style-token mode and placement of one of the four model variants.

    LJ-style records carry all-zero emotion labels, so the labelled variants
    see zero vectors for them.
    """
    if name not in VARIANTS:
        raise ValueError(f"unknown model variant {name!r}; expected one of {', '.join(VARIANTS)}")
    return VARIANTS[name]


def style_spec_for(variant: ModelVariant, cfg: RunConfig) -> StyleSpec:
    noise = 0 if variant.style_mode == "labels_only" else cfg["run.noise_dim"]
    return StyleSpec(variant.style_mode, bool(cfg["run.speaker"]), noise)


def build_configs(cfg: RunConfig, n_symbols: int, style: StyleSpec):
    mel = MelConfig(**cfg.section("mel"))
    gen = GeneratorConfig(**cfg.section("generator"), n_symbols=n_symbols, n_mels=mel.n_mels,
                          style_dim=style.length)
    disc = DiscriminatorConfig(**cfg.section("discriminator"), n_mels=mel.n_mels)
    train = TrainConfig(**cfg.section("train"), seed=cfg["run.seed"])
    return mel, gen, disc, train


# -- run directory ---------------------------------------------------------

def prepare_run_dir(out_dir, cfg: RunConfig, command: str, argv) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.to_text(), encoding="utf-8")
    info = {
        "command": command,
        "argv": ["gantron", *argv],
        "command_line": shlex.join(["gantron", *argv]),
        "seed": cfg["run.seed"],
        "version": __version__,
        "torch_version": torch.__version__,
        "numpy_version": np.__version__,
    }
    (out / "run.json").write_text(json.dumps(info, indent=2) + "\n", encoding="utf-8")
    return out


# -- data ------------------------------------------------------------------

def _read_wav(path, expected_rate: int) -> np.ndarray:
    from scipy.io import wavfile

    rate, data = wavfile.read(path)
    if rate != expected_rate:
        raise ValueError(f"{path}: sample rate {rate} != configured {expected_rate} (resample first)")
    data = np.asarray(data)
    if np.issubdtype(data.dtype, np.integer):
        data = data.astype(np.float64) / float(np.iinfo(data.dtype).max + 1)
    if data.ndim == 2:
        data = data.mean(axis=1)
    return data.astype(np.float64)


def load_prepared(data_dir) -> list[dict]:
    """Entries of a preprocessed directory's ``manifest.jsonl``, paths made absolute."""
    data_dir = Path(data_dir)
    path = data_dir / "manifest.jsonl"
    if not path.exists():
        raise FileNotFoundError(f"{data_dir} is not a preprocessed directory (no manifest.jsonl)")
    out = []
    for line in path.read_text(encoding="utf-8").splitlines():
        if line.strip():
            d = json.loads(line)
            d["mel_path"] = str(data_dir / d["mel_path"])
            out.append(d)
    return out


def _speaker_table(entries) -> dict:
    keys = sorted({f"{e['dataset']}:{e['speaker']}" for e in entries})
    return {k: i for i, k in enumerate(keys)}


# -- subcommands -----------------------------------------------------------

def cmd_preprocess(args, cfg: RunConfig, out: Path) -> None:
    mel_cfg = MelConfig(**cfg.section("mel"))
    records = parse_manifest(args.manifest, args.format)
    if not records:
        raise ValueError(f"manifest {args.manifest} has no records")
    charset = Charset()
    (out / "mels").mkdir(exist_ok=True)
    lines = []
    for rec in records:
        if rec.audio_path and Path(rec.audio_path).exists():
            mel = waveform_to_mel(_read_wav(rec.audio_path, mel_cfg.sample_rate), mel_cfg)
        elif rec.mel_path and Path(rec.mel_path).exists():
            mel = read_mel(rec.mel_path)
            if mel.n_mels != mel_cfg.n_mels:
                raise ValueError(f"{rec.mel_path}: {mel.n_mels} mel bands, configured {mel_cfg.n_mels}")
        else:
            raise FileNotFoundError(f"record {rec.id}: neither audio nor mel file found")
        rel = Path("mels") / f"{rec.id}.mel"
        write_mel(mel, out / rel)
        lines.append(json.dumps({
            "id": rec.id, "text": rec.text, "symbols": charset.encode(rec.text),
            "mel_path": str(rel), "n_frames": mel.n_frames, "speaker": rec.speaker_id,
            "dataset": rec.dataset, "emotions": [float(v) for v in rec.emotion_labels],
        }, sort_keys=True))
    (out / "manifest.jsonl").write_text("".join(ln + "\n" for ln in lines), encoding="utf-8")
    charset.to_file(out / "charset.txt")
    ids = [r.id for r in records]
    if len(ids) >= 3:
        train, val, test = split_dataset(ids, cfg["run.split"], seed=cfg["run.seed"])
    else:
        train, val, test = ids, [], []
    (out / "splits.json").write_text(json.dumps({"train": train, "val": val, "test": test}, indent=1) + "\n")
    if charset.unknown_count:
        log.warning("%d characters were outside the symbol set", charset.unknown_count)
    print(f"preprocessed {len(records)} utterances into {out}")


def cmd_train(args, cfg: RunConfig, out: Path) -> None:
    variant = select_model_variant(cfg["run.model_type"])
    style = style_spec_for(variant, cfg)
    entries, splits = [], {"train": set(), "val": set()}
    for d in args.data:
        prepared = load_prepared(d)
        entries.extend(prepared)
        split_path = Path(d) / "splits.json"
        if split_path.exists():
            s = json.loads(split_path.read_text())
            for part in splits:
                splits[part].update(s[part])
        else:
            splits["train"].update(e["id"] for e in prepared)
    entries = [e for e in entries if e["dataset"] in variant.datasets]
    if not entries:
        raise ValueError(f"no records from {variant.datasets} for variant {variant.name!r}")
    speakers = _speaker_table(entries)
    n_speakers = len(speakers)

    def example(e):
        return Example(e["symbols"], read_mel(e["mel_path"]), np.asarray(e["emotions"], np.float32),
                       (speakers[f"{e['dataset']}:{e['speaker']}"], n_speakers))

    train_set = [example(e) for e in entries if e["id"] in splits["train"]]
    val_set = [example(e) for e in entries if e["id"] in splits["val"]]
    if not train_set:
        raise ValueError("training split is empty")

    if args.resume:
        state = load_checkpoint(args.resume)
    else:
        charset = Charset()
        _, gen_cfg, disc_cfg, train_cfg = build_configs(cfg, len(charset), style)
        state = init_train_state(gen_cfg, disc_cfg, train_cfg)
        state.meta = {
            "model_type": variant.name, "style_mode": style.mode, "has_speaker": style.has_speaker,
            "noise_dim": style.noise_dim, "speakers": speakers, "symbols": charset.symbols,
        }
    bs = state.config.batch_size
    val_rng = np.random.default_rng(cfg["run.seed"] + 17)
    val_batches = [make_batch(val_set[i:i + bs], style, val_rng) for i in range(0, len(val_set), bs)]
    fit(state, train_set, style, val_batches, max_steps=cfg["train.max_steps"],
        metrics_path=out / "metrics.tsv", checkpoint_path=out / "checkpoint.gtrn")
    print(f"trained to step {state.global_step}; checkpoint at {out / 'checkpoint.gtrn'}")


def _load_model(path):
    state = load_checkpoint(path)
    meta = state.meta
    if "style_mode" not in meta:
        raise ValueError(f"{path} lacks style metadata; was it written by 'gantron train'?")
    return state, StyleSpec(meta["style_mode"], meta["has_speaker"], meta["noise_dim"]), Charset(meta["symbols"])


def _speaker_value(state, speaker: int) -> Optional[float]:
    if not state.meta["has_speaker"]:
        return None
    n = max(1, len(state.meta["speakers"]))
    if not 0 <= speaker < n:
        raise ValueError(f"speaker index {speaker} out of range [0, {n})")
    return speaker / max(1, n - 1)


def cmd_synthesize(args, cfg: RunConfig, out: Path) -> None:
    state, style, charset = _load_model(args.checkpoint)
    labels = np.zeros(N_EMOTIONS, np.float32)
    for item in args.emotion or []:
        name, _, value = item.partition("=")
        if name not in EMOTIONS:
            raise UsageError(f"unknown emotion {name!r}; expected one of {', '.join(EMOTIONS)}")
        labels[EMOTIONS.index(name)] = float(value or 1.0)
    rng = np.random.default_rng(cfg["run.seed"])
    speaker = None
    if style.has_speaker:
        n = max(1, len(state.meta["speakers"]))
        if not 0 <= args.speaker < n:
            raise ValueError(f"speaker index {args.speaker} out of range [0, {n})")
        speaker = (args.speaker, n)
    token = build_style_token(style.mode, None if style.mode == "noise_only" else labels,
                              speaker, style.noise_dim, rng)
    texts = [args.text] if args.text else _read_texts(args.texts)
    summary = []
    for i, text in enumerate(texts):
        res = synthesize(text, token, state.generator, seed=cfg["run.seed"] + i, charset=charset)
        name = f"utt_{i:04d}.mel"
        write_mel(res.mel, out / name)
        summary.append({"file": name, "text": text, "status": res.status, "n_steps": res.n_steps,
                        "style": [float(v) for v in token.values]})
        print(f"{name}: {res.status} after {res.n_steps} steps")
    (out / "synthesis.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")


def _read_texts(path) -> list[str]:
    texts = [ln.strip() for ln in Path(path).read_text(encoding="utf-8").splitlines() if ln.strip()]
    if not texts:
        raise ValueError(f"{path} holds no sentences")
    return texts


def cmd_eval_groups(args, cfg: RunConfig, out: Path) -> None:
    state, style, charset = _load_model(args.checkpoint)
    mode = cfg["eval.mode"]
    expected = {"labels": ("labels_only",), "noise": ("noise_only",), "control": ("noise_only",),
                "fixed_label": ("labels_plus_noise",), "fixed_noise": ("labels_plus_noise",)}[mode]
    if style.mode not in expected:
        raise ValueError(f"eval mode {mode!r} needs a {expected[0]} model, checkpoint has {style.mode}")
    seed = cfg["run.seed"]
    rng = np.random.default_rng(seed)
    specs = build_group_specs(mode, cfg["eval.intensity_range"], style.noise_dim, rng,
                              _speaker_value(state, args.speaker))
    texts = _read_texts(args.texts)
    n_files = cfg["eval.n_files"]
    entries, rates = [], {}
    for spec in specs:
        _, rate = generate_group(texts, spec, state.generator, n_files, rng, out_dir=out,
                                 base_seed=seed + 100_000 * spec.group_id, charset=charset)
        rates[spec.group_id] = rate
        entries.extend(read_group_manifest(out / f"group_{spec.group_id}.jsonl"))
    write_group_manifest(entries, out / "groups.jsonl")
    report = run_group_classification(entries, cfg["run.split"], ClassifierConfig(**cfg.section("classifier")),
                                      seed=seed)
    report.save(out, "groups_report")
    save_accuracy_curves({f"{mode} groups": report}, out, "groups_accuracy")
    (out / "failure_rates.json").write_text(json.dumps(
        {"per_group": rates, "overall": failure_rate(entries)}, indent=2) + "\n")
    print(f"group accuracy {report.accuracy:.3f} over {report.n_test} test files; "
          f"failure rate {failure_rate(entries):.3f}")


def cmd_augment_check(args, cfg: RunConfig, out: Path) -> None:
    from .corpus import UtteranceRecord

    real, real_mels = [], {}
    for d in args.real:
        for e in load_prepared(d):
            rec = UtteranceRecord(e["id"], e["text"], e["mel_path"], e["speaker"],
                                  np.asarray(e["emotions"], np.float32), dataset=e["dataset"])
            real.append(rec)
    generated: list[GroupManifestEntry] = []
    for path in args.generated or []:
        generated.extend(read_group_manifest(path))
    report = augmentation_check(real, generated, cfg["eval.emotions"], cfg["run.seed"], cfg["run.split"],
                                ClassifierConfig(**cfg.section("classifier")))
    report.baseline.save(out, "baseline_report")
    report.augmented.save(out, "augmented_report")
    save_accuracy_curves({"real": report.baseline, "real + generated": report.augmented}, out, "augment_accuracy")
    (out / "augment_summary.json").write_text(json.dumps(
        {"baseline": report.baseline.accuracy, "augmented": report.augmented.accuracy,
         "difference": report.difference, "n_generated": report.n_generated}, indent=2) + "\n")
    print(f"baseline {report.baseline.accuracy:.3f}, augmented {report.augmented.accuracy:.3f} "
          f"({report.n_generated} generated files)")


# -- argument parsing ------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# flag dest -> config key
FLAG_KEYS = {
    "seed": "run.seed",
    "model_type": "run.model_type",
    "max_steps": "train.max_steps",
    "batch_size": "train.batch_size",
    "mode": "eval.mode",
    "n_files": "eval.n_files",
}


def build_parser() -> argparse.ArgumentParser:
    keys = config_keys()

    def keyed(p, flag, dest, type_, help_, **kw):
        p.add_argument(flag, dest=dest, type=type_, default=None,
                       help=f"{help_} (config key {FLAG_KEYS[dest]}, default: {_format(keys[FLAG_KEYS[dest]].default)})",
                       **kw)

    common = _Parser(add_help=False)
    common.add_argument("--config", help="flat 'key = value' config file (default: none)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key; repeatable (default: none)")
    common.add_argument("--out-dir", required=True, help="directory for every artifact of the run (required)")
    keyed(common, "--seed", "seed", int, "global seed")
    common.add_argument("--verbose", action="store_true", help="debug logging (default: off)")

    parser = _Parser(prog="gantron", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"gantron {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    p = sub.add_parser("preprocess", parents=[common], help="compute mels and an encoded manifest")
    p.add_argument("--format", required=True, choices=["lj", "vesus"], help="manifest format (required)")
    p.add_argument("--manifest", required=True, help="input manifest path (required)")

    p = sub.add_parser("train", parents=[common], help="adversarial training")
    p.add_argument("--data", action="append", required=True,
                   help="preprocessed directory; repeat for several corpora (required)")
    keyed(p, "--model-type", "model_type", str, "model variant", choices=list(VARIANTS))
    keyed(p, "--max-steps", "max_steps", int, "generator updates to run")
    keyed(p, "--batch-size", "batch_size", int, "utterances per batch")
    p.add_argument("--resume", help="checkpoint to continue from (default: none)")

    p = sub.add_parser("synthesize", parents=[common], help="free-running synthesis")
    p.add_argument("--checkpoint", required=True, help="trained checkpoint (required)")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--text", help="one sentence to synthesize")
    src.add_argument("--texts", help="file with one sentence per line")
    p.add_argument("--emotion", action="append", metavar="NAME=INTENSITY",
                   help=f"emotion label, repeatable; names: {', '.join(EMOTIONS)} (default: all zero)")
    p.add_argument("--speaker", type=int, default=0, help="speaker index (default: 0)")

    p = sub.add_parser("eval-groups", parents=[common], help="generate six style groups and classify them")
    p.add_argument("--checkpoint", required=True, help="trained checkpoint (required)")
    keyed(p, "--mode", "mode", str, "group set", choices=list(SPEC_SETS))
    keyed(p, "--n-files", "n_files", int, "files per group")
    p.add_argument("--texts", required=True, help="file of sentences to cycle through, one per line (required)")
    p.add_argument("--speaker", type=int, default=0, help="speaker index (default: 0)")

    p = sub.add_parser("augment-check", parents=[common],
                       help="emotion classification with and without generated data")
    p.add_argument("--real", action="append", required=True, help="preprocessed labelled directory (required)")
    p.add_argument("--generated", action="append", help="group manifest of generated files; repeatable (default: none)")
    return parser


COMMANDS = {
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "synthesize": cmd_synthesize,
    "eval-groups": cmd_eval_groups,
    "augment-check": cmd_augment_check,
}


def effective_config(args, env=None) -> RunConfig:
    file_values = read_config_file(args.config) if args.config else {}
    overrides = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        overrides[key.strip()] = value.strip()
    for dest, key in FLAG_KEYS.items():
        value = getattr(args, dest, None)
        if value is not None:
            overrides[key] = value
    return RunConfig.build(file_values, overrides, env)


def run(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        try:
            args = build_parser().parse_args(argv)
        except SystemExit as exc:  # --help and --version
            return int(exc.code or 0)
        if not args.command:
            raise UsageError("gantron: a subcommand is required: " + ", ".join(COMMANDS))
        cfg = effective_config(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        out = prepare_run_dir(args.out_dir, cfg, args.command, argv)
        COMMANDS[args.command](args, cfg, out)
    except UsageError as exc:
        print(f"gantron {args.command}: {exc}", file=sys.stderr)
        return 1
    except (ValueError, OSError, RuntimeError, FloatingPointError, KeyError) as exc:
        print(f"gantron {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
