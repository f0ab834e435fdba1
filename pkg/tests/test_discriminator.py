import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from gantron.discriminator_net import (
    DiscriminatorConfig,
    build_discriminator,
    conv_disc_score,
    linear_disc_score,
    num_parameters,
    pack_windows,
    score_batch,
    window_starts,
)
from windowing import ScriptedRng, all_cases, check_conv, check_linear, feasible_next


def test_conv_tiling_examples():
    assert window_starts(100, 20, "convolutional") == [0, 20, 40, 60, 80]
    assert window_starts(95, 20, "convolutional") == [0, 20, 40, 60, 75]
    assert window_starts(20, 20, "convolutional") == [0]
    assert window_starts(7, 20, "convolutional") == [0]


def test_linear_scripted_overlaps():
    rng = ScriptedRng([3, 0, 10])
    assert window_starts(80, 20, "linear", 10, rng) == [0, 17, 37, 47, 60]
    assert all(c == (0, 11) for c in rng.calls)


def test_final_window_overlap_may_exceed_max():
    # 25 frames, window 20: the right-aligned second window overlaps the first by 15
    starts = window_starts(25, 20, "linear", 2, ScriptedRng([0]))
    assert starts == [0, 5]
    assert 20 - (starts[1] - starts[0]) > 2


def test_packing_matches_brute_force_small_grid():
    for n, w, mo in all_cases(max_n=30, max_w=8, max_overlap=7):
        assert check_conv(n, w), (n, w)
        assert check_linear(n, w, mo), (n, w, mo)


def test_oracle_rejects_a_broken_packer():
    # the oracle must see the difference between legal and illegal transitions
    assert 5 not in feasible_next(0, 40, 10, 2)  # overlap 5 > 2 on a non-final window
    assert 8 in feasible_next(0, 40, 10, 2)
    assert 30 in feasible_next(25, 40, 10, 2)  # final right-aligned window


@given(st.integers(1, 200), st.integers(1, 20), st.integers(0, 10), st.integers(0, 2**31 - 1))
@settings(max_examples=200)
def test_random_packing_covers_every_frame(n, w, mo, seed):
    mo = min(mo, w - 1)
    starts = window_starts(n, w, "linear", mo, np.random.default_rng(seed))
    covered = np.zeros(max(n, w), bool)
    for s in starts:
        covered[s:s + w] = True
    assert covered.all()
    assert starts[0] == 0 and starts[-1] == max(n - w, 0)
    steps = np.diff(starts)
    assert (steps[:-1] >= w - mo).all() if len(steps) > 1 else True
    assert (steps >= 1).all() and (steps <= w).all()


def test_pack_windows_contents_and_short_padding():
    cfg = DiscriminatorConfig(kind="convolutional", window_size=4, n_mels=3, hidden_dims=(8,))
    mel = torch.arange(30, dtype=torch.float32).reshape(3, 10)
    pack = pack_windows(mel, cfg)
    assert pack.start_indices == [0, 4, 6]
    assert torch.equal(pack.windows[2], mel[:, 6:10].T)
    short = pack_windows(mel[:, :2], cfg)
    assert short.windows.shape == (1, 4, 3)
    assert torch.equal(short.windows[0, 2:], mel[:, 1:2].T.expand(2, 3))


def test_pack_errors():
    cfg = DiscriminatorConfig(kind="linear", window_size=4, n_mels=3, max_overlap=2)
    with pytest.raises(ValueError):
        pack_windows(torch.zeros(5, 10), cfg)
    with pytest.raises(ValueError):
        pack_windows(torch.zeros(3, 10), cfg)  # random overlap without an rng
    with pytest.raises(ValueError):
        DiscriminatorConfig(window_size=4, max_overlap=4)


def test_full_scale_parameter_counts():
    conv = build_discriminator(DiscriminatorConfig(kind="convolutional"))
    lin = build_discriminator(DiscriminatorConfig(kind="linear"))
    assert num_parameters(conv) == 13_642_320
    assert num_parameters(lin) == 1_345_537


def test_scores_are_scalars_and_deterministic_in_eval():
    rng = np.random.default_rng(0)
    mel = torch.tensor(rng.standard_normal((16, 45)), dtype=torch.float32)
    conv = build_discriminator(DiscriminatorConfig(kind="convolutional", window_size=5, n_mels=16,
                                                   hidden_dims=(8, 8))).eval()
    lin = build_discriminator(DiscriminatorConfig(kind="linear", window_size=5, n_mels=16,
                                                  hidden_dims=(8, 8), max_overlap=2)).eval()
    assert conv_disc_score(mel, conv).shape == ()
    assert torch.equal(conv_disc_score(mel, conv), conv_disc_score(mel, conv))
    a = linear_disc_score(mel, lin, np.random.default_rng(1))
    b = linear_disc_score(mel, lin, np.random.default_rng(1))
    assert a.shape == () and torch.equal(a, b)
    with pytest.raises(TypeError):
        conv_disc_score(mel, lin)


def test_score_batch_matches_per_item_scores_and_ignores_padding():
    rng = np.random.default_rng(0)
    lin = build_discriminator(DiscriminatorConfig(kind="linear", window_size=5, n_mels=16,
                                                  hidden_dims=(8, 8), max_overlap=2)).eval()
    mels = torch.tensor(rng.standard_normal((3, 16, 40)), dtype=torch.float32)
    lengths = [40, 23, 9]
    mels[1, :, 23:] = 99.0
    batched = score_batch(lin, mels, lengths, np.random.default_rng(5))
    r = np.random.default_rng(5)
    single = torch.stack([lin.score(mels[i, :, :n], r) for i, n in enumerate(lengths)])
    torch.testing.assert_close(batched, single)
