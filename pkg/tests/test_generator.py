import numpy as np
import pytest
import torch

from gantron.corpus import DEFAULT_SYMBOLS, StyleToken, collate_batch
from gantron.generator_net import GeneratorConfig, build_generator, inject_style
from gantron.mel_features import MelSpectrogram


def _batch(text_lens=(5, 7), n_frames=(50, 50), n_mels=80, style=None, seed=0):
    rng = np.random.default_rng(seed)
    items = []
    for n, t in zip(text_lens, n_frames):
        mel = MelSpectrogram(rng.standard_normal((n_mels, t)).astype(np.float32))
        tok = style if style is not None else StyleToken(np.zeros(6, np.float32), "labels_only", True)
        items.append((rng.integers(2, 30, n).tolist(), mel, tok))
    return collate_batch(items)


def _lstm(inp, hid):
    return 4 * hid * (inp + hid) + 8 * hid


def _conv_bn(cin, cout, k):
    return cin * cout * k + cout + 2 * cout


def hand_count(c: GeneratorConfig) -> int:
    mem = 2 * c.encoder_rnn_dim + (c.style_dim if c.style_placement == "decoder" else 0)
    enc_in = c.embedding_dim + (c.style_dim if c.style_placement == "encoder" else 0)
    n = c.n_symbols * c.embedding_dim
    n += _conv_bn(enc_in, c.encoder_filters, c.encoder_kernel_size)
    n += (c.encoder_n_convs - 1) * _conv_bn(c.encoder_filters, c.encoder_filters, c.encoder_kernel_size)
    n += 2 * _lstm(c.encoder_filters, c.encoder_rnn_dim)
    dims = [c.n_mels, *c.prenet_dims]
    n += sum(a * b for a, b in zip(dims[:-1], dims[1:]))
    n += _lstm(c.prenet_dims[-1] + mem, c.attention_rnn_dim)
    n += c.attention_rnn_dim * c.attention_dim + mem * c.attention_dim + c.attention_dim
    n += 2 * c.location_filters * c.location_kernel_size + c.location_filters * c.attention_dim
    n += _lstm(c.attention_rnn_dim + mem, c.decoder_rnn_dim)
    n += (c.decoder_rnn_dim + mem + 1) * c.n_mels + (c.decoder_rnn_dim + mem + 1)
    chans = [c.n_mels] + [c.postnet_filters] * (c.postnet_n_convs - 1) + [c.n_mels]
    n += sum(_conv_bn(a, b, c.postnet_kernel_size) for a, b in zip(chans[:-1], chans[1:]))
    return n


@pytest.mark.parametrize("placement", ["decoder", "encoder"])
def test_tiny_parameter_count_matches_hand_sum(placement):
    cfg = GeneratorConfig.tiny(style_dim=5, style_placement=placement)
    assert build_generator(cfg).num_parameters() == hand_count(cfg)


def test_tiny_parameter_count_frozen():
    # 38 symbols, style 5, memory 32 + 5 = 37; summed by hand layer by layer
    cfg = GeneratorConfig.tiny(style_dim=5)
    assert cfg.n_symbols == len(DEFAULT_SYMBOLS) == 38
    by_hand = (
        38 * 16                                   # embedding
        + (16 * 16 * 5 + 16 + 32)                 # encoder conv + batch norm
        + 2 * (4 * 16 * 32 + 8 * 16)              # bidirectional LSTM
        + (16 * 32 + 32 * 32)                     # pre-net
        + (4 * 32 * (32 + 37 + 32) + 8 * 32)      # attention LSTMCell
        + (32 * 16 + 37 * 16 + 16)                # query, memory, energy projections
        + (2 * 4 * 7 + 4 * 16)                    # location conv + dense
        + (4 * 32 * (32 + 37 + 32) + 8 * 32)      # decoder LSTMCell
        + (69 * 16 + 16) + (69 + 1)               # mel and gate projections
        + 2 * (16 * 16 * 5 + 16 + 32)             # post-net
    )
    assert by_hand == 39_278
    assert hand_count(cfg) == build_generator(cfg).num_parameters() == by_hand


def test_full_scale_parameter_counts():
    assert build_generator(GeneratorConfig(style_dim=6)).num_parameters() == 28_187_239
    assert build_generator(GeneratorConfig(style_dim=6 + 512)).num_parameters() == 32_488_551


def test_teacher_forced_shapes():
    model = build_generator(GeneratorConfig.tiny(n_mels=80, style_dim=6))
    out = model(_batch())
    assert out.mel_output.shape == (2, 80, 50)
    assert out.mel_postnet_output.shape == (2, 80, 50)
    assert out.gate_out.shape == (2, 50)
    assert out.alignments.shape == (2, 50, 7)


def test_alignment_rows_sum_to_one_and_respect_padding():
    model = build_generator(GeneratorConfig.tiny(n_mels=80, style_dim=6)).eval()
    with torch.no_grad():
        out = model(_batch())
    torch.testing.assert_close(out.alignments.sum(-1), torch.ones(2, 50))
    # the 5-symbol item sits in row 1 after sorting; its padded text positions get no weight
    assert float(out.alignments[1, :, 5:].abs().max()) == 0.0
    assert torch.isfinite(out.alignments).all()


def test_postnet_residual_identity():
    model = build_generator(GeneratorConfig.tiny(n_mels=80, style_dim=6)).eval()
    with torch.no_grad():
        for p in model.postnet.parameters():
            p.zero_()
        out = model(_batch())
    assert torch.equal(out.mel_postnet_output, out.mel_output)


def test_inject_style_shapes_and_zero_block():
    seq = torch.randn(1, 7, 64)
    out = inject_style(seq, torch.zeros(1, 6))
    assert out.shape == (1, 7, 70)
    assert torch.equal(out[..., :64], seq)
    assert not out[..., 64:].any()


def test_inject_style_locality():
    seq = torch.randn(2, 7, 64)
    a, b = inject_style(seq, torch.rand(2, 6)), inject_style(seq, torch.rand(2, 6))
    assert torch.equal(a[..., :64], b[..., :64])
    assert not torch.equal(a[..., 64:], b[..., 64:])


def test_placement_mismatch_rejected():
    model = build_generator(GeneratorConfig.tiny(style_dim=6))
    with pytest.raises(ValueError):
        model.inject_style(torch.zeros(1, 3, 8), torch.zeros(1, 6), "encoder")
    with pytest.raises(ValueError):
        model.inject_style(torch.zeros(1, 3, 8), torch.zeros(1, 5), "decoder")


def test_decoder_placement_leaves_encoder_outputs_bit_identical():
    model = build_generator(GeneratorConfig.tiny(style_dim=6)).eval()
    text = torch.randint(2, 30, (1, 9))
    lens = torch.tensor([9])
    with torch.no_grad():
        enc_a, mem_a = model.encode(text, lens, torch.rand(1, 6))
        enc_b, mem_b = model.encode(text, lens, torch.rand(1, 6))
    assert torch.equal(enc_a, enc_b)
    assert not torch.equal(mem_a, mem_b)


def test_encoder_placement_changes_encoder_outputs():
    model = build_generator(GeneratorConfig.tiny(style_dim=6, style_placement="encoder")).eval()
    text = torch.randint(2, 30, (1, 9))
    lens = torch.tensor([9])
    with torch.no_grad():
        enc_a, _ = model.encode(text, lens, torch.rand(1, 6))
        enc_b, _ = model.encode(text, lens, torch.rand(1, 6))
    assert not torch.equal(enc_a, enc_b)


def test_decode_step_well_formed_and_deterministic():
    model = build_generator(GeneratorConfig.tiny(style_dim=6)).eval()
    text = torch.randint(2, 30, (1, 6))
    lens = torch.tensor([6])
    style = torch.rand(1, 6)
    with torch.no_grad():
        runs = []
        for _ in range(2):
            state = model.init_decoder_state(text, lens, style)
            frame, gate, w, state = model.decode_step(torch.zeros(1, 16), state, torch.Generator().manual_seed(3))
            runs.append((frame, gate, w))
    assert frame.shape == (1, 16) and torch.isfinite(gate).all()
    assert float(w.sum()) == pytest.approx(1.0, abs=1e-6)
    for x, y in zip(*runs):
        assert torch.equal(x, y)
    assert state.step == 1


def test_decode_step_requires_state():
    model = build_generator(GeneratorConfig.tiny(style_dim=6))
    with pytest.raises(RuntimeError):
        model.decode_step(torch.zeros(1, 16), None)


def test_build_is_seeded_and_leaves_global_rng_alone():
    torch.manual_seed(123)
    before = torch.get_rng_state()
    a = build_generator(GeneratorConfig.tiny(style_dim=6), seed=4)
    assert torch.equal(before, torch.get_rng_state())
    b = build_generator(GeneratorConfig.tiny(style_dim=6), seed=4)
    for pa, pb in zip(a.parameters(), b.parameters()):
        assert torch.equal(pa, pb)


def test_non_finite_activation_reports_step():
    model = build_generator(GeneratorConfig.tiny(n_mels=80, style_dim=6)).eval()
    batch = _batch()
    batch.mels[:, :, 10] = float("nan")  # teacher-forced input to step 11
    with pytest.raises(FloatingPointError, match="step 11"):
        with torch.no_grad():
            model(batch)


def test_config_validation_and_round_trip():
    with pytest.raises(ValueError):
        GeneratorConfig(style_placement="middle")
    with pytest.raises(ValueError):
        GeneratorConfig(encoder_kernel_size=4)
    cfg = GeneratorConfig.tiny(style_dim=3)
    assert GeneratorConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError):
        GeneratorConfig.from_dict({"bogus": 1})


def test_gradient_finite_difference_sample():
    """Autograd matches central differences on a random 1% of parameters (float64)."""
    cfg = GeneratorConfig.tiny(style_dim=6, n_mels=8)
    model = build_generator(cfg, seed=1).double().eval()
    batch = _batch(text_lens=(4, 3), n_frames=(6, 5), n_mels=8).to(torch.float64)

    def loss():
        out = model(batch)
        return (out.mel_postnet_output ** 2).mean() + out.gate_out.sigmoid().mean()

    model.zero_grad()
    loss().backward()
    params = [p for p in model.parameters()]
    flat = [(pi, j) for pi, p in enumerate(params) for j in range(p.numel())]
    rng = np.random.default_rng(0)
    chosen = rng.choice(len(flat), size=max(1, len(flat) // 100), replace=False)
    eps = 1e-6
    worst = 0.0
    with torch.no_grad():
        for k in chosen:
            pi, j = flat[k]
            p = params[pi].view(-1)
            analytic = float(params[pi].grad.view(-1)[j])
            orig = float(p[j])
            p[j] = orig + eps
            up = float(loss())
            p[j] = orig - eps
            down = float(loss())
            p[j] = orig
            numeric = (up - down) / (2 * eps)
            err = abs(analytic - numeric) / max(abs(numeric), abs(analytic), 1e-5)  # absolute floor for near-zero entries
            worst = max(worst, err)
    assert worst < 1e-3
