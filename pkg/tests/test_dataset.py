import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from lgda.dataset import (CUP, DISC, SHIFT_PRESETS, DatasetError, ImageSample, NestingRepairWarning,
                          SynthConfig, SynthShift, augment, crop_roi, decode_mask, encode_mask,
                          generate_synthetic, hflip, load_dataset, rot90, rotate, save_dataset,
                          split_samples)


def _nested_ok(sample):
    return not (sample.mask[..., CUP] > sample.mask[..., DISC]).any()


def test_generation_is_deterministic():
    cfg = SynthConfig(image_size=32, n_source=3, n_target=3, shift=SHIFT_PRESETS["strong"], seed=5)
    a, b = generate_synthetic(cfg), generate_synthetic(cfg)
    for xs, ys in zip(a, b):
        for x, y in zip(xs, ys):
            assert x.id == y.id
            assert np.array_equal(x.image, y.image) and np.array_equal(x.mask, y.mask)


def test_small_config_masks_are_nested_and_nonempty():
    src, tgt = generate_synthetic(SynthConfig(image_size=64, n_source=4, n_target=2, seed=0))
    assert len(src) == 4 and len(tgt) == 2
    for s in src + tgt:
        cup, disc = s.mask[..., CUP].sum(), s.mask[..., DISC].sum()
        assert 0 < cup < disc
        assert _nested_ok(s)
        assert 0.0 <= s.image.min() and s.image.max() <= 1.0


def test_identity_shift_matches_source_statistics():
    src, tgt = generate_synthetic(SynthConfig(image_size=48, n_source=40, n_target=40, seed=1))
    ms = np.array([s.image.mean() for s in src])
    mt = np.array([s.image.mean() for s in tgt])
    # difference of means well inside sampling noise
    assert abs(ms.mean() - mt.mean()) < 3 * np.sqrt(ms.var() / 40 + mt.var() / 40)


def test_strong_shift_changes_appearance():
    src, tgt = generate_synthetic(SynthConfig(image_size=48, n_source=20, n_target=20,
                                              shift=SHIFT_PRESETS["strong"], seed=1))
    assert np.mean([t.image.mean() for t in tgt]) > np.mean([s.image.mean() for s in src]) + 0.05


def test_config_validation():
    with pytest.raises(DatasetError):
        SynthConfig(image_size=16)
    with pytest.raises(DatasetError):
        SynthConfig(shift=SynthShift(noise_sigma=-1))
    with pytest.raises(DatasetError):
        SynthConfig(n_source=-1)


def test_sample_invariants():
    img = np.zeros((4, 4, 3), dtype=np.float32)
    bad = np.zeros((4, 4, 2), dtype=np.uint8)
    bad[0, 0, CUP] = 1
    with pytest.raises(DatasetError):
        ImageSample("x", img, bad)
    with pytest.raises(DatasetError):
        ImageSample("x", img + 2)
    with pytest.raises(DatasetError):
        ImageSample("x", img, domain_tag="validation")


def test_mask_palette():
    enc = np.array([[0, 128, 255]], dtype=np.uint8)
    m = decode_mask(enc)
    assert m[0, 0].tolist() == [0, 0]
    assert m[0, 1, DISC] == 1 and m[0, 1, CUP] == 0
    assert m[0, 2, DISC] == 1 and m[0, 2, CUP] == 1
    np.testing.assert_array_equal(encode_mask(m), enc)
    with pytest.raises(DatasetError):
        decode_mask(np.array([[7]], dtype=np.uint8))


def test_roundtrip_one_pair(tmp_path):
    src, _ = generate_synthetic(SynthConfig(image_size=32, n_source=1, n_target=0, seed=2))
    root = save_dataset(src, tmp_path / "d", synth_config=SynthConfig(image_size=32, n_source=1, n_target=0))
    loaded = load_dataset(root, domain_tag="source")
    assert len(loaded) == 1 and loaded[0].labeled
    np.testing.assert_array_equal(loaded[0].mask, src[0].mask)
    assert np.abs(loaded[0].image - src[0].image).max() <= 0.5 / 255 + 1e-6
    assert json.loads((root / "synth_config.json").read_text())["image_size"] == 32


def test_nesting_repair_on_load(tmp_path):
    root = tmp_path / "d"
    (root / "images").mkdir(parents=True)
    (root / "masks").mkdir()
    Image.fromarray(np.zeros((4, 4, 3), dtype=np.uint8)).save(root / "images" / "a.png")
    rgb = np.zeros((4, 4, 3), dtype=np.uint8)
    rgb[1, 1, 0] = 255  # cup without disc
    rgb[2, 2, :2] = 255
    Image.fromarray(rgb).save(root / "masks" / "a.png")
    with pytest.warns(NestingRepairWarning):
        (s,) = load_dataset(root)
    assert s.mask[1, 1].tolist() == [1, 1]


def test_missing_and_unreadable(tmp_path):
    root = tmp_path / "d"
    (root / "images").mkdir(parents=True)
    Image.fromarray(np.zeros((4, 4, 3), dtype=np.uint8)).save(root / "images" / "a.png")
    with pytest.raises(DatasetError):
        load_dataset(root, labeled=True)
    assert load_dataset(root)[0].mask is None
    (root / "images" / "b.png").write_bytes(b"not a png")
    with pytest.raises(DatasetError):
        load_dataset(root)
    with pytest.raises(DatasetError):
        load_dataset(tmp_path / "nowhere")


def test_read_masks_false_never_opens_masks(tmp_path):
    root = tmp_path / "d"
    (root / "images").mkdir(parents=True)
    (root / "masks").mkdir()
    Image.fromarray(np.zeros((4, 4, 3), dtype=np.uint8)).save(root / "images" / "a.png")
    (root / "masks" / "a.png").write_bytes(b"garbage that would fail to decode")
    (s,) = load_dataset(root, read_masks=False)
    assert s.mask is None


def _scalar_crop(sample, center, size):
    h, w = sample.shape
    top = min(max(center[0] - size // 2, 0), h - size)
    left = min(max(center[1] - size // 2, 0), w - size)
    rows = [[sample.image[top + i, left + j] for j in range(size)] for i in range(size)]
    return np.array(rows)


def test_crop_roi():
    src, _ = generate_synthetic(SynthConfig(image_size=32, n_source=1, n_target=0, seed=0))
    s = src[0]
    same = crop_roi(s, (16, 16), 32)
    np.testing.assert_array_equal(same.image, s.image)
    for center in [(1, 2), (30, 31), (0, 16), (16, 16)]:
        c = crop_roi(s, center, 12)
        assert c.image.shape == (12, 12, 3) and c.mask.shape == (12, 12, 2)
        np.testing.assert_array_equal(c.image, _scalar_crop(s, center, 12))
        assert _nested_ok(c)
    with pytest.raises(DatasetError):
        crop_roi(s, (16, 16), 33)


def test_geometric_augmentations(tiny_data):
    s = tiny_data[0][0]
    twice = hflip(hflip(s))
    np.testing.assert_array_equal(twice.image, s.image)
    np.testing.assert_array_equal(twice.mask, s.mask)
    r = rot90(s)
    assert r.mask.sum() == s.mask.sum()
    rr = rotate(s, 10.0)
    assert set(np.unique(rr.mask)) <= {0, 1} and _nested_ok(rr)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_augment_keeps_invariants_and_is_seeded(seed):
    src, _ = generate_synthetic(SynthConfig(image_size=32, n_source=1, n_target=0, seed=0))
    s = src[0]
    a, b = augment(s, seed), augment(s, seed)
    np.testing.assert_array_equal(a.image, b.image)
    np.testing.assert_array_equal(a.mask, b.mask)
    assert 0 <= a.image.min() and a.image.max() <= 1
    assert _nested_ok(a)
    assert augment(s, None) is s


def test_augment_without_mask():
    s = ImageSample("u", np.full((8, 8, 3), 0.5, dtype=np.float32), None, "target")
    assert augment(s, 3).mask is None


def test_split_samples_seeded(tiny_data):
    src = tiny_data[0]
    kept, held = split_samples(src, 0.25, 4)
    assert len(held) == 3 and len(kept) == 9
    assert [s.id for s in held] == [s.id for s in split_samples(src, 0.25, 4)[1]]
