"""Exit criteria. Each test prints one ``PASS``/``FAIL`` line.

Run alone with ``pytest -m acceptance -s tests/test_acceptance.py`` or
``python3 tests/test_acceptance.py``.
"""

import math
import time

import numpy as np
import pytest
import torch

from gantron.corpus import split_dataset
from gantron.discriminator_net import DiscriminatorConfig, build_discriminator, num_parameters
from gantron.evaluation import augmentation_check, run_group_classification
from gantron.generator_net import GeneratorConfig, build_generator
from gantron.inference import synthesize
from gantron.losses import (
    diagonal_mass,
    gate_loss,
    guided_attention_loss,
    mel_loss,
    wasserstein_critic_loss,
    wasserstein_generator_term,
)
from gantron import trainer
from gantron.trainer import (
    StyleSpec,
    TrainConfig,
    checkpoint_bytes,
    fit,
    init_train_state,
    load_checkpoint,
    make_batch,
    state_from_bytes,
    validate,
)
from test_losses import _mask, _random_batch, ref_gate_loss, ref_guided_loss, ref_mel_loss
from toydata import char_examples, emotion_generated, emotion_real, group_entries, tiny_configs
from windowing import all_cases, check_conv, check_linear

pytestmark = pytest.mark.acceptance


@pytest.fixture(autouse=True)
def _single_thread():
    threads = torch.get_num_threads()
    torch.set_num_threads(1)
    yield
    torch.set_num_threads(threads)


def verdict(capsys, n, ok, detail):
    with capsys.disabled():
        print(f"\n{'PASS' if ok else 'FAIL'} criterion {n}: {detail}")
    assert ok, detail


def within(value, anchor, tol):
    return abs(value - anchor) <= tol * anchor


def test_1_parameter_counts(capsys):
    labels = build_generator(GeneratorConfig(style_dim=6)).num_parameters()
    noise = build_generator(GeneratorConfig(style_dim=6 + 512)).num_parameters()
    conv = num_parameters(build_discriminator(DiscriminatorConfig(kind="convolutional")))
    lin = num_parameters(build_discriminator(DiscriminatorConfig(kind="linear")))
    ok = (within(labels, 28e6, 0.15) and within(noise, 32e6, 0.15) and within(conv, 12e6, 0.30)
          and 0.6e6 <= lin <= 2.0e6)
    verdict(capsys, 1, ok, f"generator {labels:,} / {noise:,}, conv critic {conv:,}, linear critic {lin:,}")


def test_2_loss_correctness(capsys):
    worst = 0.0
    for seed in range(20):
        d = _random_batch(seed, B=4, M=6, T=11, N=8)
        mask = _mask(d["mel_lengths"], 11)
        t = lambda k: torch.tensor(d[k], dtype=torch.float64)  # noqa: E731
        pairs = [
            (float(mel_loss(t("pre"), t("post"), t("target"), mask)),
             ref_mel_loss(d["pre"], d["post"], d["target"], d["mel_lengths"])),
            (float(gate_loss(t("logits"), t("gate"), mask)), ref_gate_loss(d["logits"], d["gate"], d["mel_lengths"])),
            (float(guided_attention_loss(t("align"), torch.tensor(d["text_lengths"]), torch.tensor(d["mel_lengths"]))),
             ref_guided_loss(d["align"], d["text_lengths"], d["mel_lengths"], 0.2)),
        ]
        real, fake = d["logits"][0], d["logits"][1]
        pairs.append((float(wasserstein_critic_loss(torch.tensor(real), torch.tensor(fake))),
                      sum(fake) / len(fake) - sum(real) / len(real)))
        pairs.append((float(wasserstein_generator_term(torch.tensor(fake))), -sum(fake) / len(fake)))
        worst = max(worst, *(abs(a - b) / max(abs(b), 1e-12) for a, b in pairs))

    d = _random_batch(99, B=3, M=4, T=7, N=5)
    mask = _mask(d["mel_lengths"], 7)
    g = lambda k: torch.tensor(d[k], dtype=torch.float64, requires_grad=True)  # noqa: E731
    tl, ml = torch.tensor(d["text_lengths"]), torch.tensor(d["mel_lengths"])
    check = dict(eps=1e-6, atol=1e-9, rtol=1e-5, raise_exception=False)
    grads_ok = all([
        torch.autograd.gradcheck(lambda a, b: mel_loss(a, b, torch.tensor(d["target"]), mask),
                                 (g("pre"), g("post")), **check),
        torch.autograd.gradcheck(lambda x: gate_loss(x, torch.tensor(d["gate"]), mask), (g("logits"),), **check),
        torch.autograd.gradcheck(lambda a: guided_attention_loss(a, tl, ml), (g("align"),), **check),
        torch.autograd.gradcheck(wasserstein_critic_loss, (g("pre"), g("post")), **check),
        torch.autograd.gradcheck(wasserstein_generator_term, (g("post"),), **check),
    ])
    verdict(capsys, 2, worst < 1e-6 and grads_ok,
            f"max relative error vs reference loops {worst:.2e}; float64 gradient checks {'pass' if grads_ok else 'fail'}")


def _steps_to_diagonal(warmup: bool, seed: int, examples, probe, budget=1000, every=10):
    gcfg, dcfg = tiny_configs()
    state = init_train_state(gcfg, dcfg, TrainConfig(seed=seed, batch_size=8, attn_warmup_steps=500,
                                                     attn_enabled=warmup))
    reached = []

    def check(s, _):
        if s.global_step % every:
            return False
        s.generator.eval()
        with torch.no_grad():
            out = s.generator(probe)
        s.generator.train()
        if diagonal_mass(out.alignments, probe.text_lengths, probe.mel_lengths) >= 0.5:
            reached.append(s.global_step)
            return True
        return False

    fit(state, examples, StyleSpec("labels_only", False, 0), max_steps=budget, on_cycle=check)
    return reached[0] if reached else math.inf


def test_3_guided_attention_warmup(capsys):
    t0 = time.time()
    examples = char_examples(50, n_mels=16, seed=0)
    probe = make_batch(examples[:16], StyleSpec("labels_only", False, 0), np.random.default_rng(0))
    rows = []
    for seed in range(3):
        rows.append((seed, _steps_to_diagonal(True, seed, examples, probe),
                     _steps_to_diagonal(False, seed, examples, probe)))
    ok = all(w < n for _, w, n in rows) and time.time() - t0 <= 1800
    detail = "; ".join(f"seed {s}: warm-up {w} vs none {n}" for s, w, n in rows)
    verdict(capsys, 3, ok, f"steps to diagonal mass >= 0.5: {detail} ({time.time() - t0:.0f}s)")


def test_4_tiny_overfit(capsys):
    t0 = time.time()
    examples = char_examples(1, n_mels=16, seed=3, labels=[0.8, 0, 0, 0, 0])
    examples[0].speaker = (0, 1)
    spec = StyleSpec("labels_only", True, 0)
    gcfg, dcfg = tiny_configs(style_dim=spec.length)
    state = init_train_state(gcfg, dcfg, TrainConfig(seed=0, batch_size=1, attn_warmup_steps=500))
    batch = make_batch(examples, spec, np.random.default_rng(0))
    before = validate(state, [batch]).mel_loss
    fit(state, examples, spec, max_steps=2000)
    after = validate(state, [batch]).mel_loss
    res = synthesize(examples[0].symbols, spec.token_for(examples[0], np.random.default_rng(0)),
                     state.generator, seed=0)
    drop = 1 - after / before
    ok = drop >= 0.9 and res.completed and time.time() - t0 <= 900
    verdict(capsys, 4, ok, f"mel loss {before:.3f} -> {after:.4f} ({drop:.1%} drop); synthesis {res.status} "
            f"after {res.n_steps} frames ({time.time() - t0:.0f}s)")


def test_5_wgan_discipline(capsys, monkeypatch):
    examples = char_examples(20, n_mels=16, seed=1)
    gcfg, dcfg = tiny_configs()
    state = init_train_state(gcfg, dcfg, TrainConfig(seed=0, batch_size=4))
    counts = {"critic": 0, "generator": 0, "violations": 0}
    critic_update, generator_update = trainer._critic_update, trainer._generator_update

    def checked_critic(s, batch):
        report = critic_update(s, batch)
        counts["critic"] += 1
        c = s.config.clip_c
        counts["violations"] += sum(int((p.detach().abs() > c).sum()) for p in s.discriminator.parameters())
        return report

    def counted_generator(s, batch):
        counts["generator"] += 1
        return generator_update(s, batch)

    monkeypatch.setattr(trainer, "_critic_update", checked_critic)
    monkeypatch.setattr(trainer, "_generator_update", counted_generator)
    fit(state, examples, StyleSpec("labels_only", False, 0), max_steps=200)
    ok = (counts["critic"] == 100 and counts["generator"] == 200 and counts["violations"] == 0
          and (state.global_step, state.disc_step) == (200, 100))
    verdict(capsys, 5, ok, f"{counts['critic']} critic / {counts['generator']} generator updates, "
            f"{counts['violations']} parameters outside [-c, c]")


def test_6_control_group_chance(capsys):
    chance = []
    for seed in range(3):
        entries, mels = group_entries(300, separable=False, seed=seed)
        chance.append(run_group_classification(entries, seed=seed, mels=mels).accuracy)
    entries, mels = group_entries(300, separable=True, seed=7)
    separable = run_group_classification(entries, seed=7, mels=mels).accuracy
    ok = all(abs(a - 1 / 6) <= 0.08 for a in chance) and separable > 0.95
    verdict(capsys, 6, ok, f"same-distribution accuracies {[round(a, 3) for a in chance]} "
            f"(chance 0.167 +/- 0.08); separable {separable:.3f}")


def test_7_split_and_determinism(capsys, tmp_path):
    sizes = tuple(len(p) for p in split_dataset(range(1000), (0.85, 0.05, 0.10), seed=0))

    examples = char_examples(12, n_mels=16, seed=0)
    spec = StyleSpec("labels_only", False, 0)
    val = [make_batch(examples[:4], spec, np.random.default_rng(1))]
    gcfg, dcfg = tiny_configs()
    cfg = TrainConfig(seed=3, batch_size=4, val_interval=4)

    state = init_train_state(gcfg, dcfg, cfg)
    fit(state, examples, spec, val, max_steps=6, metrics_path=tmp_path / "resumed.tsv",
        checkpoint_path=tmp_path / "ck.gtrn")
    blob = (tmp_path / "ck.gtrn").read_bytes()
    round_trip = checkpoint_bytes(state_from_bytes(blob)) == blob
    fit(load_checkpoint(tmp_path / "ck.gtrn"), examples, spec, val, max_steps=16,
        metrics_path=tmp_path / "resumed.tsv")
    fit(init_train_state(gcfg, dcfg, cfg), examples, spec, val, max_steps=16, metrics_path=tmp_path / "full.tsv")
    same_log = (tmp_path / "full.tsv").read_bytes() == (tmp_path / "resumed.tsv").read_bytes()

    ok = sizes == (850, 50, 100) and round_trip and same_log
    verdict(capsys, 7, ok, f"split sizes {sizes}; checkpoint round trip {'bit-exact' if round_trip else 'differs'}; "
            f"resumed log {'identical' if same_log else 'differs'}")


def test_8_augmentation_check(capsys):
    real, real_mels = emotion_real(400, seed=0, height=0.25)
    same, same_mels = emotion_generated(200, seed=100, shift=0, height=0.25)
    shifted, shifted_mels = emotion_generated(200, seed=100, shift=1, height=0.25)
    a = augmentation_check(real, same, seed=0, real_mels=real_mels, generated_mels=same_mels)
    b = augmentation_check(real, shifted, seed=0, real_mels=real_mels, generated_mels=shifted_mels)
    ok = abs(a.difference) < 0.05 and b.difference < 0
    verdict(capsys, 8, ok, f"baseline {a.baseline.accuracy:.3f}; same-distribution {a.difference * 100:+.1f} points; "
            f"shifted {b.difference * 100:+.1f} points")


def test_9_window_packing(capsys):
    cases = list(all_cases(60, 20, 10))
    conv_bad = [(n, w) for n in range(1, 61) for w in range(1, 21) if not check_conv(n, w)]
    lin_bad = [c for c in cases if not check_linear(*c)]
    verdict(capsys, 9, not conv_bad and not lin_bad,
            f"{60 * 20} conv and {len(cases)} linear configurations vs brute force; "
            f"{len(conv_bad) + len(lin_bad)} mismatches")


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-m", "acceptance", "-q"]))
