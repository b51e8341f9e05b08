import numpy as np
import pytest

from selfmae import tensor as T
from selfmae.vit import ViTConfig, block, drop_path, init_block, init_trunk, msa, vit_forward


def _params(cfg, seed=0, dtype=np.float32, scale=None):
    p = {}
    init_trunk(p, "encoder", cfg, np.random.default_rng(seed), dtype)
    if scale is not None:
        r = np.random.default_rng(seed + 1)
        for t in p.values():
            t.data[...] = r.normal(size=t.shape) * scale
    return p


def test_config_validates_heads():
    with pytest.raises(ValueError):
        ViTConfig(embed_dim=10, num_heads=4)


def test_msa_single_token_is_value_projection(rng):
    cfg = ViTConfig(8, 1, 2)
    p = {}
    init_block(p, "b", cfg, rng, np.float64)
    for t in p.values():
        t.data[...] = rng.normal(size=t.shape)
    x = T.Tensor(rng.normal(size=(3, 1, 8)), dtype=np.float64)
    out = msa(x, p, "b.attn", 2).data
    qkv = x.data @ p["b.attn.qkv.weight"].data + p["b.attn.qkv.bias"].data
    v = qkv[..., 16:]
    ref = v @ p["b.attn.proj.weight"].data + p["b.attn.proj.bias"].data
    np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)


def test_msa_permutation_equivariant(rng):
    cfg = ViTConfig(8, 1, 2)
    p = {}
    init_block(p, "b", cfg, rng, np.float64)
    for t in p.values():
        t.data[...] = rng.normal(size=t.shape)
    x = rng.normal(size=(2, 5, 8))
    perm = rng.permutation(5)
    a = msa(T.Tensor(x, dtype=np.float64), p, "b.attn", 2).data
    b = msa(T.Tensor(x[:, perm], dtype=np.float64), p, "b.attn", 2).data
    np.testing.assert_allclose(a[:, perm], b, rtol=1e-12, atol=1e-12)


def test_msa_gradient_2x3_tokens(rng):
    cfg = ViTConfig(4, 1, 2)
    p = {}
    init_block(p, "b", cfg, rng, np.float64)
    for t in p.values():
        t.data[...] = rng.normal(size=t.shape) * 0.5
    x = T.parameter(rng.normal(size=(2, 3, 4)), dtype=np.float64)
    leaves = [x] + [p[k] for k in ("b.attn.qkv.weight", "b.attn.qkv.bias", "b.attn.proj.weight")]
    rep = T.grad_check(lambda: T.sum_(T.square(msa(x, p, "b.attn", 2))), leaves)
    assert rep.passed, rep


def test_block_eval_deterministic(rng):
    cfg = ViTConfig(8, 1, 2, droppath_rate=0.5)
    p = _params(cfg, scale=0.2)
    x = T.tensor(rng.normal(size=(2, 4, 8)))
    a = block(x, p, "encoder.blocks.0", 2, 0.5, training=False).data
    b = block(x, p, "encoder.blocks.0", 2, 0.5, training=False).data
    np.testing.assert_array_equal(a, b)


def test_block_near_certain_drop_is_identity(rng):
    cfg = ViTConfig(8, 1, 2)
    p = _params(cfg, scale=0.2)
    x = T.tensor(rng.normal(size=(16, 4, 8)))
    out = block(x, p, "encoder.blocks.0", 2, 0.999999, training=True, rng=np.random.default_rng(0)).data
    np.testing.assert_array_equal(out, x.data)


def test_droppath_expectation_monte_carlo():
    y = T.tensor(np.array([1.0, -2.0, 0.5]).reshape(1, 3).repeat(100_000, 0))
    out = drop_path(y, 0.1, True, np.random.default_rng(0)).data
    np.testing.assert_allclose(out.mean(0), y.data[0], rtol=0.02)
    zeros = (out[:, 0] == 0).mean()
    assert abs(zeros - 0.1) < 0.005
    np.testing.assert_allclose(out[out[:, 0] != 0][0], y.data[0] / 0.9, rtol=1e-6)


def test_drop_path_needs_rng_when_training():
    with pytest.raises(ValueError):
        drop_path(T.zeros((2, 3)), 0.1, True, None)


def test_depth_zero_is_final_norm_of_tokens_plus_pos(rng):
    cfg = ViTConfig(8, 0, 2, use_class_token=False)
    p = _params(cfg)
    tok = T.tensor(rng.normal(size=(2, 5, 8)))
    pos = rng.normal(size=(5, 8)).astype(np.float32)
    final, hiddens = vit_forward(tok, pos, p, cfg)
    ref = T.layer_norm(tok + T.tensor(pos), p["encoder.norm.weight"], p["encoder.norm.bias"])
    np.testing.assert_array_equal(final.data, ref.data)
    assert hiddens == []


def test_hiddens_shapes_with_class_token(rng):
    cfg = ViTConfig(8, 3, 2)
    p = _params(cfg)
    final, hiddens = vit_forward(T.tensor(rng.normal(size=(2, 5, 8))), np.zeros((6, 8)), p, cfg)
    assert final.shape == (2, 6, 8) and len(hiddens) == 3
    assert all(h.shape == (2, 6, 8) for h in hiddens)


def test_pos_mismatch_raises():
    cfg = ViTConfig(8, 1, 2)
    with pytest.raises(T.ShapeError):
        vit_forward(T.zeros((1, 5, 8)), np.zeros((5, 8)), _params(cfg), cfg)


def test_forward_reproducible_without_droppath(rng):
    cfg = ViTConfig(8, 2, 2)
    x = rng.normal(size=(2, 4, 8))
    outs = [vit_forward(T.tensor(x), np.zeros((5, 8)), _params(cfg, seed=3), cfg)[0].data for _ in range(2)]
    np.testing.assert_array_equal(*outs)


def test_full_backbone_gradient_tiny():
    cfg = ViTConfig(8, 2, 2)
    p = _params(cfg, seed=2, dtype=np.float64, scale=0.3)
    r = np.random.default_rng(9)
    tok = T.Tensor(r.normal(size=(2, 3, 8)), dtype=np.float64)
    pos = r.normal(size=(4, 8))
    rep = T.grad_check(lambda: T.sum_(T.square(vit_forward(tok, pos, p, cfg)[0])), p, tol=1e-5, max_checks=12)
    assert rep.passed, rep


def test_init_recipe():
    cfg = ViTConfig(32, 1, 4)
    p = _params(cfg)
    w = p["encoder.blocks.0.mlp.fc1.weight"].data
    assert np.abs(w).max() <= 0.04 + 1e-7
    assert abs(w.std() - 0.0176) < 0.003
    assert not p["encoder.blocks.0.mlp.fc1.bias"].data.any()
    np.testing.assert_array_equal(p["encoder.norm.weight"].data, 1.0)
    assert p["encoder.cls_token"].shape == (1, 1, 32)
