import itertools

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from rasd import asd_head, rfg, separator, weigher
from rasd.dsp import InvalidInputError
from rasd.separator import ShapeError


def rand(*shape, seed=0):
    return torch.rand(*shape, generator=torch.Generator().manual_seed(seed))


@pytest.fixture(scope="module")
def micro():
    torch.manual_seed(0)
    return separator.init_params(separator.Separator("1/8"), 0).eval()


@pytest.mark.parametrize("n, padded", [(100, 256), (256, 256), (300, 384), (1, 256), (385, 512)])
def test_padded_length(n, padded):
    assert separator.padded_length(n) == padded
    out, orig = separator.pad_time(np.ones((256, n)))
    assert out.shape == (256, padded) and orig == n
    assert out[:, :n].sum() == 256 * n and not out[:, n:].any()


def test_pad_time_rejects_wrong_bins():
    with pytest.raises(ShapeError):
        separator.pad_time(np.ones((512, 10)))
    with pytest.raises(ShapeError):
        separator.pad_time(torch.ones(1, 1, 128, 10))


@pytest.mark.parametrize("ws", ["1", "1/2", "1/4", "1/8"])
def test_param_count_matches_closed_form(ws):
    assert separator.count_params(separator.Separator(ws)) == separator.table_param_count(ws)


def test_param_count_values():
    # 4x4 kernels: sum of 16*in*out + bias (+ 2 per BN channel), hand-tallied per layer
    assert separator.table_param_count(1) == 46_022_657
    assert separator.table_param_count("1/8") == 720_897


def test_width_scale_rejected():
    with pytest.raises(ValueError):
        separator.Separator("1/3")


def test_micro_forward_shapes(micro):
    mask, fms = micro(rand(2, 1, 256, 256), rand(2, 512, seed=1))
    assert mask.shape == (2, 1, 256, 256)
    expect = {"FM1": (64, 4, 4), "FM2": (64, 8, 8), "FM3": (64, 16, 16), "FM4": (32, 32, 32),
              "FM5": (16, 64, 64), "FM6": (8, 128, 128)}
    assert {k: tuple(v.shape[1:]) for k, v in fms.items()} == expect


@settings(max_examples=8, deadline=None)
@given(st.sampled_from(["1/2", "1/4", "1/8"]), st.integers(0, 10**6), st.floats(0.0, 100.0))
def test_mask_range_any_width(ws, seed, scale):
    torch.manual_seed(seed)
    net = separator.init_params(separator.Separator(ws), seed).eval()
    with torch.no_grad():
        mask, _ = net(rand(1, 1, 256, 256, seed=seed) * scale, rand(1, 512, seed=seed + 1))
    # a saturated float32 sigmoid rounds to exactly 0 or 1, so only the closed range holds here
    assert torch.isfinite(mask).all()
    assert ((mask >= 0) & (mask <= 1)).all()


@settings(max_examples=6, deadline=None)
@given(st.sampled_from(["1/4", "1/8"]), st.integers(0, 10**6))
def test_mask_open_range_float64(ws, seed):
    net = separator.init_params(separator.Separator(ws), seed).double().eval()
    with torch.no_grad():
        mask, _ = net(rand(1, 1, 256, 256, seed=seed).double(), rand(1, 512, seed=seed + 1).double())
    assert ((mask > 0) & (mask < 1)).all()


def test_visual_conditioning_changes_output(micro):
    x = rand(1, 1, 256, 256)
    with torch.no_grad():
        a, _ = micro(x, rand(1, 512, seed=1))
        b, _ = micro(x, rand(1, 512, seed=2))
    assert (a - b).abs().max() > 0


def test_separator_input_errors(micro):
    with pytest.raises(ShapeError):
        micro(rand(1, 1, 128, 256), rand(1, 512))
    with pytest.raises(ShapeError):
        micro(rand(1, 1, 256, 256), rand(1, 256))


def test_match_and_concat_zero_pads():
    a = torch.ones(1, 2, 3, 5)
    b = torch.full((1, 1, 4, 4), 2.0)
    out = separator.match_and_concat(a, b)
    assert out.shape == (1, 3, 4, 5)
    assert out[0, :2, 3].abs().sum() == 0 and out[0, 2, :, 4].abs().sum() == 0


def test_init_is_deterministic():
    a = separator.init_params(separator.Separator("1/8"), 7)
    b = separator.init_params(separator.Separator("1/8"), 7)
    for (n, p), (_, q) in zip(a.named_parameters(), b.named_parameters()):
        assert torch.equal(p, q), n


# ---------------------------------------------------------------- rfg

def test_combo_channels():
    assert sum(rfg.fm_channels(n) for n in ("FM3", "FM5")) == 640
    assert rfg.fm_channels("FM5") == 128
    assert sum(rfg.fm_channels(n) for n in ("FM3", "FM4", "FM5")) == 896


def test_combo_normalization_and_errors():
    assert rfg.normalize_combo("FM5, FM3") == ("FM3", "FM5")
    assert rfg.normalize_combo(["FM4", "FM4"]) == ("FM4",)
    for bad in ("", [], "FM9", ["FM3", "conv"]):
        with pytest.raises(rfg.ConfigError):
            rfg.normalize_combo(bad)
    assert len(rfg.ABLATION_COMBOS) == 6 and rfg.DEFAULT_COMBO in rfg.ABLATION_COMBOS


def test_upsample_replicate_matches_loop():
    fm = rand(1, 2, 3, 4)
    out = rfg.upsample_replicate(fm, (12, 8))
    for c, i, j in itertools.product(range(2), range(12), range(8)):
        assert out[0, c, i, j] == fm[0, c, i // 4, j // 2]
    with pytest.raises(ShapeError):
        rfg.upsample_replicate(fm, (7, 8))


def test_fuse_grid_and_identity():
    fms = {"FM3": rand(1, 512, 16, 16), "FM4": rand(1, 256, 32, 32), "FM5": rand(1, 128, 64, 64)}
    assert rfg.fuse(fms, ("FM3", "FM5")).shape == (1, 640, 64, 64)
    assert torch.equal(rfg.fuse(fms, ("FM5",)), fms["FM5"])
    assert rfg.fuse(fms, ("FM3", "FM4", "FM5")).shape == (1, 896, 64, 64)


def test_bridge_shapes_and_zero_input():
    g = separator.init_params(rfg.FeatureBridge(640), 0)
    out = g(torch.zeros(1, 640, 64, 64))
    assert out.shape == (1, 128, 64)
    assert not out.any()
    with pytest.raises(ShapeError):
        g(torch.zeros(1, 640, 60, 64))


def test_rfg_alignment_four_audio_frames_per_visual():
    for t in (256, 384, 512):
        assert rfg.visual_frames(t) == t // 4
    a, b = rfg.align(torch.zeros(2, 5, 64), torch.zeros(2, 3, 61))
    assert a.shape[-1] == b.shape[-1] == 61


def test_rfg_micro_end_to_end(micro):
    gen = separator.init_params(rfg.RobustFeatureGenerator("1/8"), 0)
    with torch.no_grad():
        _, fms = micro(rand(1, 1, 256, 384), rand(1, 512))
        feat = gen(fms)
    assert feat.shape == (1, gen.out_dim, 96) and gen.out_dim == 16


# ---------------------------------------------------------------- weigher

@pytest.fixture(scope="module")
def wgen():
    return separator.init_params(weigher.WeightGenerator("1/8"), 0)


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 40), st.integers(0, 10**6), st.floats(0.0, 50.0))
def test_weigher_simplex_and_range(wgen, t, seed, scale):
    with torch.no_grad():
        probs, w = wgen(rand(2, 1, 256, t, seed=seed) * scale)
        probs64, w64 = wgen.double()(rand(2, 1, 256, t, seed=seed).double())
        wgen.float()
    assert probs.shape == (2, 3, t) and w.shape == (2, t)
    assert torch.allclose(probs.sum(1), torch.ones(2, t), atol=1e-6)
    assert ((w >= 0) & (w <= 1)).all()
    assert ((w64 > 0) & (w64 < 1)).all()


def test_weigher_full_width_shapes():
    trace = []
    probs, w = weigher.WeightGenerator(1)(rand(1, 1, 256, 7), trace=trace)
    assert trace[-2:] == [(256, 4, 7), (1024, 7)]
    assert probs.shape == (1, 3, 7) and w.shape == (1, 7)


def test_weigher_rejects_bins(wgen):
    with pytest.raises(ShapeError):
        wgen(rand(1, 1, 255, 9))


def test_weigher_loss_hand_case():
    probs = torch.tensor([[[0.5], [0.25], [0.25]]], dtype=torch.float64)
    labels = torch.tensor([[0]])
    loss = weigher.weigher_loss(probs, labels, torch.tensor([[0.5]]), torch.ones(3))
    assert float(loss) == pytest.approx(np.log(2) + 0.5, abs=1e-12)


def test_weigher_loss_limit_cases():
    labels = torch.tensor([[0, 1, 2, 1]])
    onehot = torch.nn.functional.one_hot(labels, 3).permute(0, 2, 1).double()
    w = torch.tensor([[0.2, 0.9, 1.0, 0.5]], dtype=torch.float64)
    assert float(weigher.weigher_loss(onehot, labels, w, torch.ones(3))) == pytest.approx(0.35, abs=1e-12)
    uniform = torch.full((1, 3, 4), 1 / 3, dtype=torch.float64)
    ones = torch.ones(1, 4, dtype=torch.float64)
    assert float(weigher.weigher_loss(uniform, labels, ones, torch.ones(3))) == pytest.approx(np.log(3), abs=1e-9)


def test_weigher_loss_errors():
    probs = torch.full((1, 3, 2), 1 / 3)
    with pytest.raises(InvalidInputError):
        weigher.weigher_loss(probs, torch.tensor([[0, 3]]), torch.ones(1, 2), torch.ones(3))
    with pytest.raises(InvalidInputError):
        weigher.weigher_loss(probs, torch.tensor([[0, 1, 2]]), torch.ones(1, 3), torch.ones(3))


def test_apply_weights_examples():
    loss = torch.tensor([1.0, 2.0, 3.0], dtype=torch.float64)
    assert float(weigher.apply_weights(loss, torch.tensor([0.5, 1.0, 0.5]))) == pytest.approx(4 / 3, abs=1e-15)
    assert float(weigher.apply_weights(loss, torch.zeros(3))) == 0.0
    assert float(weigher.apply_weights(loss, torch.ones(3))) == float(loss.mean())
    with pytest.raises(InvalidInputError):
        weigher.apply_weights(loss, torch.ones(2))


def test_fixed_weights():
    w = weigher.fixed_weights(torch.tensor([0, 1, 2, 1]), 0.85)
    assert w.tolist() == [1.0, 0.85, 1.0, 0.85]


# ---------------------------------------------------------------- detection head

def test_head_shapes_and_range():
    head = separator.init_params(asd_head.ASDHead(16), 0)
    frames = rand(3, 64, 512)
    scores = head(rand(3, 16, 64, seed=1), frames)
    assert scores.shape == (3, 64)
    assert ((scores > 0) & (scores < 1)).all()
    # audio and video lengths that differ by a frame are truncated to the shorter one
    assert head(rand(3, 16, 63, seed=1), frames).shape == (3, 63)


def test_head_empty_overlap_rejected():
    head = asd_head.ASDHead(16)
    with pytest.raises(InvalidInputError):
        head(rand(1, 16, 0), rand(1, 5, 512))


def test_visual_frontend_and_encoder_shapes():
    fe = asd_head.VisualFrontEnd(32)
    assert fe(rand(2, 10, 512)).shape == (2, 32, 10)
    enc = asd_head.PlainAudioEncoder(16, "1/8")
    assert enc(rand(2, 1, 256, 256)).shape == (2, 16, 64)
