import math
import time

import numpy as np
import pytest

from selfmae import tensor as T
from selfmae.downstream import (
    ConfigMismatch,
    FinetuneConfig,
    SegDecoderConfig,
    bce_loss,
    classify,
    default_taps,
    dice_ce_loss,
    encode,
    init_finetune,
    one_hot,
    segment,
    transfer_weights,
)
from selfmae.embeddings import PatchGrid, sincos_pos_embed
from selfmae.mae import MAEConfig, init_mae, mae_encode, make_mask
from selfmae.vit import ViTConfig


def _mae(dtype=np.float64):
    cfg = MAEConfig(PatchGrid((8, 8, 8), 1, 2), ViTConfig(16, 2, 2), decoder_dim=8, decoder_depth=1, decoder_heads=2)
    return cfg, init_mae(cfg, np.random.default_rng(0), dtype)


def _cls_cfg(labels=14, dim=16, depth=2):
    return FinetuneConfig(PatchGrid((8, 8, 8), 1, 2), ViTConfig(dim, depth, 2), task="cls", num_labels=labels)


def test_transfer_drops_decoder_and_resets_pos():
    mcfg, mstate = _mae()
    state = transfer_weights(mstate, _cls_cfg(), np.random.default_rng(1), np.float64)
    assert not any(n.startswith("decoder.") for n in state.params)
    pos = sincos_pos_embed(mcfg.grid, 16, cls_token=True, dtype=np.float64, pad=True)
    np.testing.assert_array_equal(state["encoder.pos_embed"].data, pos)
    assert state["encoder.pos_embed"].requires_grad
    np.testing.assert_array_equal(state["encoder.patch_embed.weight"].data, mstate["encoder.patch_embed.weight"].data)


def test_transferred_encoder_matches_mae_encoder_at_full_visibility(rng):
    mcfg, mstate = _mae()
    cfg = _cls_cfg()
    state = transfer_weights(mstate, cfg, rng, np.float64)
    x = T.Tensor(rng.uniform(size=(2, 1, 8, 8, 8)), dtype=np.float64)
    ref = mae_encode(x, mcfg.grid, make_mask(64, 0.0, rng, batch=2), mstate, mcfg).data
    got, _ = encode(x, state, cfg)
    np.testing.assert_allclose(got.data, ref, rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("change", ["depth", "dim", "grid"])
def test_transfer_mismatch_raises(change):
    _, mstate = _mae()
    enc = ViTConfig(16, 3 if change == "depth" else 2, 2) if change != "dim" else ViTConfig(32, 2, 2)
    spatial = (8, 8, 16) if change == "grid" else (8, 8, 8)
    cfg = FinetuneConfig(PatchGrid(spatial, 1, 2), enc, task="cls", num_labels=2)
    with pytest.raises(ConfigMismatch, match="pretrain="):
        transfer_weights(mstate, cfg, np.random.default_rng(0))


def test_classify_zero_head_returns_bias(rng):
    cfg = _cls_cfg()
    state = init_finetune(cfg, rng, np.float64)
    state["head.weight"].data[...] = 0.0
    state["head.bias"].data[...] = np.arange(14.0)
    out = classify(T.Tensor(rng.uniform(size=(3, 1, 8, 8, 8)), dtype=np.float64), state, cfg)
    assert out.shape == (3, 14)
    np.testing.assert_array_equal(out.data, np.tile(np.arange(14.0), (3, 1)))


def test_classify_reaches_class_token(rng):
    cfg = _cls_cfg(labels=3)
    state = init_finetune(cfg, rng, np.float64)
    x = T.Tensor(rng.uniform(size=(2, 1, 8, 8, 8)), dtype=np.float64)
    T.sum_(T.square(classify(x, state, cfg))).backward()
    assert np.abs(state["encoder.cls_token"].grad).sum() > 0


def test_bce_examples():
    z = T.Tensor(np.zeros((2, 3)), dtype=np.float64)
    assert bce_loss(z, np.ones((2, 3))).item() == pytest.approx(math.log(2), abs=1e-12)
    big = T.Tensor(np.full((1, 2), 30.0), dtype=np.float64)
    assert bce_loss(big, np.ones((1, 2))).item() < 1e-12
    assert bce_loss(-big, np.zeros((1, 2))).item() < 1e-12


def test_bce_matches_naive_formula(rng):
    z = rng.normal(0, 3, size=(4, 5))
    y = (rng.uniform(size=(4, 5)) < 0.5).astype(float)
    s = 1 / (1 + np.exp(-z))
    naive = -(y * np.log(s) + (1 - y) * np.log(1 - s)).mean()
    assert bce_loss(T.Tensor(z, dtype=np.float64), y).item() == pytest.approx(naive, abs=1e-6)


def test_bce_gradient(rng):
    z = T.parameter(rng.normal(size=(3, 4)) * 2, dtype=np.float64)
    y = (rng.uniform(size=(3, 4)) < 0.5).astype(float)
    assert T.grad_check(lambda: bce_loss(z, y), [z]).passed


def test_bce_rejects_soft_targets():
    with pytest.raises(ValueError):
        bce_loss(T.zeros((1, 2)), np.array([[0.5, 1.0]]))


def test_default_taps():
    assert default_taps(12, 4) == [3, 6, 9, 12]
    assert default_taps(4, 4) == [1, 2, 3, 4]
    with pytest.raises(ValueError):
        default_taps(2, 4)


def test_seg_config_validation():
    grid = PatchGrid((16, 16, 16), 1, 4)
    with pytest.raises(ValueError):
        SegDecoderConfig(grid, 3, tap_layers=[2, 2], depth=4)
    with pytest.raises(ValueError):
        SegDecoderConfig(PatchGrid((12, 12, 12), 1, 3), 3)
    assert SegDecoderConfig(grid, 3, depth=4).feature_dims == [4, 8]


@pytest.mark.parametrize("spatial", [(16, 16, 16), (16, 8, 24)])
def test_unetr_output_shape_small_patch(rng, spatial):
    cfg = FinetuneConfig(PatchGrid(spatial, 2, 4), ViTConfig(8, 2, 2), task="seg", num_labels=3)
    state = init_finetune(cfg, rng)
    out = segment(T.tensor(rng.uniform(size=(1, 2) + spatial)), state, cfg)
    assert out.shape == (1, 3) + spatial


def test_unetr_96_cubed_shape_and_time(rng):
    cfg = FinetuneConfig(PatchGrid((96, 96, 96), 1, 16), ViTConfig(32, 4, 4), task="seg", num_labels=4)
    state = init_finetune(cfg, rng)
    x = T.tensor(rng.uniform(size=(1, 1, 96, 96, 96)))
    start = time.perf_counter()
    with T.no_grad():
        out = segment(x, state, cfg)
    assert out.shape == (1, 4, 96, 96, 96)
    assert time.perf_counter() - start < 10.0


def test_unetr_gradient_tiny():
    r = np.random.default_rng(3)
    cfg = FinetuneConfig(PatchGrid((4, 4, 4), 1, 2), ViTConfig(6, 1, 2), task="seg", num_labels=2, feature_size=2)
    state = init_finetune(cfg, r, np.float64)
    x = T.Tensor(r.uniform(size=(1, 1, 4, 4, 4)), dtype=np.float64)
    labels = r.integers(0, 2, size=(1, 4, 4, 4))
    names = ["seg.out.weight", "seg.stem.conv.weight", "encoder.blocks.0.mlp.fc1.weight"]
    rep = T.grad_check(lambda: dice_ce_loss(segment(x, state, cfg), labels), [state[n] for n in names],
                       tol=1e-5, max_checks=10)
    assert rep.passed, rep


def test_segment_token_grid_mismatch(rng):
    cfg = FinetuneConfig(PatchGrid((16, 16, 16), 1, 4), ViTConfig(8, 2, 2), task="seg", num_labels=2)
    state = init_finetune(cfg, rng)
    with pytest.raises(T.ShapeError):
        segment(T.zeros((1, 1, 16, 16, 20)), state, cfg)


def test_dice_ce_uniform_logits():
    labels = np.array([[[0, 1], [1, 0]]])[:, None]
    loss, dice, ce = dice_ce_loss(T.Tensor(np.zeros((1, 2, 1, 2, 2)), dtype=np.float64), labels, return_terms=True)
    assert ce.item() == pytest.approx(math.log(2), abs=1e-12)
    # p = 0.5 everywhere, two voxels per class: 2*1/(2+2) per class
    assert dice.item() == pytest.approx(1 - (2 + 1e-5) / (4 + 1e-5), abs=1e-12)
    assert loss.item() == pytest.approx((dice.item() + ce.item()) / 2, abs=1e-15)


def test_soft_dice_of_hard_prediction_is_one_minus_dsc(rng):
    labels = rng.integers(0, 3, size=(2, 4, 4, 4))
    pred = rng.integers(0, 3, size=(2, 4, 4, 4))
    logits = (one_hot(pred, 3, np.float64) - 0.5) * 200
    _, dice, _ = dice_ce_loss(T.Tensor(logits, dtype=np.float64), labels, smooth=0.0, return_terms=True)
    dsc = [2 * ((pred == k) & (labels == k)).sum() / ((pred == k).sum() + (labels == k).sum()) for k in range(3)]
    assert dice.item() == pytest.approx(1 - np.mean(dsc), abs=1e-9)


def test_dice_ce_label_range():
    with pytest.raises(ValueError):
        dice_ce_loss(T.zeros((1, 2, 2, 2, 2)), np.full((1, 2, 2, 2), 2))
