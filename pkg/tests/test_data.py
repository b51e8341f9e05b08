import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from selfmae.data import (
    ContainerError,
    DataError,
    SynthSpec,
    clip_rescale,
    decode_array,
    decode_checkpoint,
    encode_array,
    encode_checkpoint,
    hist_equalize,
    instance_norm_nonzero,
    load_checkpoint,
    load_dataset,
    random_flip_crop,
    read_manifest,
    save_checkpoint,
    synth_generate,
)
from selfmae.data.synth import ellipsoid_volume
from selfmae.mae import MAEConfig, init_mae
from selfmae.embeddings import PatchGrid
from selfmae.vit import ViTConfig

DTYPES = [np.float32, np.float64, np.uint8, np.int64]


def test_container_bytes_hand_assembled():
    want = b"NTC1" + bytes([2, 2, 0, 0]) + struct.pack("<QQ", 1, 3) + bytes([1, 2, 3])
    assert encode_array(np.array([[1, 2, 3]], dtype=np.uint8)) == want
    scalar = b"NTC1" + bytes([0, 0, 0, 0]) + struct.pack("<f", 1.5)
    assert encode_array(np.array(1.5, dtype=np.float32)) == scalar


@settings(max_examples=40, deadline=None)
@given(st.sampled_from(DTYPES), st.lists(st.integers(0, 4), min_size=0, max_size=4), st.integers(0, 2**31 - 1))
def test_container_round_trip(dtype, shape, seed):
    r = np.random.default_rng(seed)
    if np.dtype(dtype).kind == "f":
        arr = r.normal(size=shape).astype(dtype)
    else:
        arr = r.integers(0, 200, size=shape).astype(dtype)
    out = decode_array(encode_array(arr))
    assert out.dtype == arr.dtype and out.shape == arr.shape
    assert out.tobytes() == arr.tobytes()


def test_container_keeps_nan_and_inf_bits():
    arr = np.array([np.nan, np.inf, -np.inf, -0.0], dtype=np.float64)
    assert decode_array(encode_array(arr)).tobytes() == arr.tobytes()


def test_non_contiguous_input_written_row_major():
    arr = np.arange(12, dtype=np.float32).reshape(3, 4).T
    np.testing.assert_array_equal(decode_array(encode_array(arr)), arr)


@pytest.mark.parametrize(
    "mutate,reason",
    [
        (lambda b: b"NTC2" + b[4:], "bad-magic"),
        (lambda b: b[:-1], "truncated"),
        (lambda b: b[:6], "truncated"),
        (lambda b: b + b"\0", "trailing-bytes"),
        (lambda b: b[:4] + bytes([9]) + b[5:], "bad-dtype-code"),
        (lambda b: b[:6] + b"\1" + b[7:], "bad-reserved"),
    ],
)
def test_container_corruption_reports_reason(mutate, reason):
    good = encode_array(np.arange(6, dtype=np.float64).reshape(2, 3))
    with pytest.raises(ContainerError) as err:
        decode_array(mutate(good))
    assert err.value.reason == reason


def test_unsupported_dtype():
    with pytest.raises(ContainerError):
        encode_array(np.zeros(2, dtype=np.complex64))


def test_checkpoint_round_trip_and_layout():
    arrays = {"b": np.ones(2, np.float32), "a": np.arange(3, dtype=np.int64)}
    buf = encode_checkpoint(arrays, {"x": 1})
    assert struct.unpack("<I", buf[:4])[0] == 3
    got, cfg = decode_checkpoint(buf)
    assert cfg == {"x": 1} and set(got) == {"a", "b"}
    for k in arrays:
        assert got[k].tobytes() == arrays[k].tobytes()


def test_checkpoint_errors():
    with pytest.raises(ContainerError, match="missing-config"):
        decode_checkpoint(struct.pack("<I", 0))
    entry = struct.pack("<H", 1) + b"a" + encode_array(np.zeros(1))
    with pytest.raises(ContainerError, match="duplicate-name"):
        decode_checkpoint(struct.pack("<I", 2) + entry + entry)
    with pytest.raises(ContainerError, match="truncated"):
        decode_checkpoint(encode_checkpoint({"a": np.zeros(3)}, {})[:-2])


def test_model_checkpoint_bit_exact_and_deterministic(tmp_path):
    cfg = MAEConfig(PatchGrid((8, 8, 8), 1, 4), ViTConfig(12, 1, 2), decoder_dim=6, decoder_depth=1, decoder_heads=2)
    state = init_mae(cfg, np.random.default_rng(0))
    save_checkpoint(tmp_path / "a.ntc", state)
    save_checkpoint(tmp_path / "b.ntc", init_mae(cfg, np.random.default_rng(0)))
    assert (tmp_path / "a.ntc").read_bytes() == (tmp_path / "b.ntc").read_bytes()
    back = load_checkpoint(tmp_path / "a.ntc")
    assert back.config == state.config
    for n, t in state.params.items():
        assert back[n].data.tobytes() == t.data.tobytes() and back[n].requires_grad


def test_clip_rescale_examples():
    np.testing.assert_array_equal(clip_rescale(np.array([-500.0, 250.0, 1000.0])), [0.0, 1.0, 1.0])
    assert clip_rescale(np.array([37.5]))[0] == pytest.approx(0.5, abs=1e-15)
    x = np.random.default_rng(0).uniform(size=10)
    np.testing.assert_array_equal(clip_rescale(x, 0.0, 1.0), x)
    with pytest.raises(ValueError):
        clip_rescale(x, 1.0, 1.0)


def test_instance_norm_nonzero_examples():
    x = np.zeros((3, 4))
    x[0, :2] = [1.0, 3.0]
    x[1, :2] = 7.0
    out = instance_norm_nonzero(x)
    np.testing.assert_allclose(out[0, :2], [-1.0, 1.0], rtol=1e-6)
    np.testing.assert_allclose(out[1, :2], 0.0, atol=1e-12)
    np.testing.assert_array_equal(out[:, 2:], 0.0)
    np.testing.assert_array_equal(out[2], 0.0)


def test_hist_equalize_constant_and_ramp():
    c = np.full((5, 7), 90, np.uint8)
    np.testing.assert_array_equal(hist_equalize(c), c)
    ramp = np.random.default_rng(0).permutation(256).astype(np.uint8).reshape(16, 16)
    np.testing.assert_array_equal(hist_equalize(ramp), ramp)
    with pytest.raises(ValueError):
        hist_equalize(np.zeros((2, 2), np.float32))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_hist_equalize_cdf_close_to_ramp(seed):
    r = np.random.default_rng(seed)
    img = np.clip(r.normal(r.uniform(40, 200), r.uniform(5, 40), size=(32, 32)), 0, 255).astype(np.uint8)
    out = hist_equalize(img)
    n = img.size
    bin_mass = np.bincount(img.ravel(), minlength=256).max() / n
    cdf_out = np.cumsum(np.bincount(out.ravel(), minlength=256)) / n
    assert np.all(np.abs(cdf_out - np.arange(256) / 255.0) <= bin_mass + 1 / 255)
    order = np.argsort(img.ravel(), kind="stable")
    assert np.all(np.diff(out.ravel()[order].astype(int)) >= 0)


def test_flip_crop_identity_and_errors():
    x = np.random.default_rng(0).normal(size=(2, 4, 5, 6))
    y, _ = random_flip_crop(x, None, (4, 5, 6), None, flip=False)
    np.testing.assert_array_equal(y, x)
    with pytest.raises(ValueError):
        random_flip_crop(x, None, (5, 5, 6), np.random.default_rng(0))
    with pytest.raises(ValueError):
        random_flip_crop(x, None, (2, 2, 2), None)


def test_flip_crop_deterministic():
    x = np.random.default_rng(0).normal(size=(1, 9, 9, 9))
    a, _ = random_flip_crop(x, None, 5, np.random.default_rng(7))
    b, _ = random_flip_crop(x, None, 5, np.random.default_rng(7))
    np.testing.assert_array_equal(a, b)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_flip_crop_keeps_spike_and_label_together(seed):
    r = np.random.default_rng(seed)
    spatial = (7, 6, 8)
    x = np.zeros((2,) + spatial)
    lab = np.zeros(spatial, np.int64)
    pos = tuple(int(r.integers(0, s)) for s in spatial)
    x[(slice(None),) + pos] = 1.0
    lab[pos] = 3
    cx, cl = random_flip_crop(x, lab, (4, 4, 4), r)
    assert {tuple(p) for p in np.argwhere(cx[0])} == {tuple(p) for p in np.argwhere(cl == 3)}
    np.testing.assert_array_equal(cx[0], cx[1])


def test_synth_byte_identical(tmp_path):
    spec = SynthSpec(task="seg", count=3, size=16, patch=16, seed=4)
    synth_generate(spec, tmp_path / "a")
    synth_generate(spec, tmp_path / "b")
    for f in sorted((tmp_path / "a").iterdir()):
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()


def test_seg_classes_present_at_default_spec():
    spec = SynthSpec()
    rng = np.random.default_rng(spec.seed)
    present = np.zeros(spec.num_classes)
    for _ in range(spec.count):
        _, lab = ellipsoid_volume(rng, spec)
        assert lab.min() >= 0 and lab.max() < spec.num_classes
        present += np.bincount(lab.ravel(), minlength=spec.num_classes) > 0
    assert np.all(present / spec.count >= 0.8)


def test_cls_prevalence_monte_carlo(tmp_path):
    spec = SynthSpec(task="cls", count=1000, size=32, patch=16, num_classes=5, prevalence=0.3, seed=1)
    m = read_manifest(synth_generate(spec, tmp_path))
    labels = np.array([it["labels"] for it in m["items"]])
    assert np.all(np.abs(labels.mean(0) - 0.3) <= 0.05)


def test_manifest_schema_and_loading(tmp_path):
    spec = SynthSpec(task="seg", count=4, size=16, patch=16, test_fraction=0.25)
    path = synth_generate(spec, tmp_path)
    m = json.loads(path.read_text())
    assert m["version"] == 1 and m["task"] == "seg"
    assert [it["split"] for it in m["items"]] == ["train"] * 3 + ["test"]
    assert all({"file", "label_file", "split"} <= set(it) for it in m["items"])
    ds = load_dataset(tmp_path, "train")
    assert ds.images.shape == (3, 1, 16, 16, 16) and ds.images.dtype == np.float32
    assert ds.images.min() >= 0.0 and ds.images.max() <= 1.0
    assert ds.labels.shape == (3, 16, 16, 16) and ds.num_classes == 4


def test_cls_dataset_preprocessed(tmp_path):
    synth_generate(SynthSpec(task="cls", count=4, size=32, patch=16, num_classes=3), tmp_path)
    ds = load_dataset(tmp_path, None)
    assert ds.images.shape == (4, 1, 32, 32) and ds.labels.shape == (4, 3)
    assert ds.images.max() == 1.0


def test_dataset_errors(tmp_path):
    with pytest.raises(DataError):
        read_manifest(tmp_path)
    (tmp_path / "manifest.json").write_text(json.dumps({"version": 1, "task": "seg", "items": []}))
    with pytest.raises(DataError):
        load_dataset(tmp_path)
    (tmp_path / "manifest.json").write_text(
        json.dumps({"version": 1, "task": "seg", "items": [{"file": "gone.ntc", "label_file": "x", "split": "train"}]})
    )
    with pytest.raises(DataError):
        load_dataset(tmp_path)


def test_synth_spec_validation():
    with pytest.raises(ValueError):
        SynthSpec(size=40, patch=16)
    with pytest.raises(ValueError):
        SynthSpec(task="det")
