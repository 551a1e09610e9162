"""Sample loading, depth normalization, manifests, and joint augmentation."""

import numpy as np
import pytest

import oracles
from mmafnet import ContractError, FormatError
from mmafnet.data import (
    AugmentConfig,
    RgbdSample,
    augment_sample,
    load_manifest,
    load_sample,
    normalize_depth,
    resize_bilinear,
    resize_nearest,
    sample_paths,
    save_sample,
    write_manifest_ini,
)
from mmafnet.pnm import read_pgm, write_pgm, write_ppm


def make_files(root, sample_id="img_00000", size=6, depth=None):
    rng = np.random.default_rng(0)
    rgb = rng.integers(0, 256, size=(3, size, size), dtype=np.uint8)
    if depth is None:
        depth = rng.integers(1, 65536, size=(size, size), dtype=np.uint16)
    labels = rng.integers(0, 3, size=(size, size), dtype=np.uint8)
    save_sample(root, sample_id, rgb, depth, labels)
    return rgb, depth, labels


class TestLoadSample:
    def test_rgb_scaling_and_label_passthrough(self, tmp_path):
        rgb, depth, labels = make_files(tmp_path)
        s = load_sample(tmp_path, "img_00000")
        assert s.rgb.dtype == np.float32
        assert np.array_equal(s.rgb, rgb.astype(np.float32) / 255.0)
        assert s.rgb.max() <= 1.0
        assert np.array_equal(s.labels, labels.astype(np.int64))

    def test_full_brightness_maps_to_one(self, tmp_path):
        rgb = np.full((3, 2, 2), 255, dtype=np.uint8)
        save_sample(tmp_path, "a", rgb, np.ones((2, 2), np.uint16),
                    np.zeros((2, 2), np.uint8))
        s = load_sample(tmp_path, "a")
        assert np.all(s.rgb == 1.0)

    def test_depth_min_max_normalization(self, tmp_path):
        depth = np.array([[0, 1000], [3000, 5000]], dtype=np.uint16)
        save_sample(tmp_path, "a", np.zeros((3, 2, 2), np.uint8), depth,
                    np.zeros((2, 2), np.uint8))
        s = load_sample(tmp_path, "a")
        assert s.depth[0, 0, 0] == 0.0  # missing sentinel stays 0
        assert s.depth[0, 0, 1] == 0.0  # valid minimum
        assert s.depth[0, 1, 1] == 1.0  # valid maximum
        assert s.depth[0, 1, 0] == pytest.approx(0.5)
        assert not s.no_valid_depth

    def test_all_zero_depth_is_flagged(self, tmp_path):
        save_sample(tmp_path, "a", np.zeros((3, 2, 2), np.uint8),
                    np.zeros((2, 2), np.uint16), np.zeros((2, 2), np.uint8))
        s = load_sample(tmp_path, "a")
        assert np.all(s.depth == 0.0)
        assert s.no_valid_depth

    def test_constant_valid_depth_normalizes_to_zero(self):
        out, has_valid = normalize_depth(np.full((2, 2), 700, dtype=np.uint16))
        assert has_valid
        assert np.all(out == 0.0)

    def test_dimension_disagreement_rejected(self, tmp_path):
        make_files(tmp_path)
        _, depth_path, _ = sample_paths(tmp_path, "img_00000")
        write_pgm(depth_path, np.ones((4, 4), dtype=np.uint16))
        with pytest.raises(FormatError):
            load_sample(tmp_path, "img_00000")

    def test_file_round_trip_lossless_for_depth_and_labels(self, tmp_path):
        _, depth, labels = make_files(tmp_path)
        _, depth_path, label_path = sample_paths(tmp_path, "img_00000")
        assert np.array_equal(read_pgm(depth_path), depth)
        assert np.array_equal(read_pgm(label_path), labels)


class TestManifest:
    def build(self, root, ids=("a", "b", "c")):
        for sample_id in ids:
            make_files(root, sample_id)
        (root / "splits").mkdir()
        (root / "splits" / "train.txt").write_text("a\nb\n")
        (root / "splits" / "val.txt").write_text("c\n")
        (root / "splits" / "test.txt").write_text("")
        write_manifest_ini(root, num_classes=3)

    def test_load_valid_manifest(self, tmp_path):
        self.build(tmp_path)
        m = load_manifest(tmp_path)
        assert m.num_classes == 3
        assert m.void_label == 255
        assert m.split_ids("train") == ["a", "b"]
        assert m.split_ids("val") == ["c"]
        assert m.split_ids("test") == []

    def test_missing_sample_file_rejected(self, tmp_path):
        self.build(tmp_path)
        (tmp_path / "rgb" / "b.ppm").unlink()
        with pytest.raises(FormatError):
            load_manifest(tmp_path)

    def test_overlapping_splits_rejected(self, tmp_path):
        self.build(tmp_path)
        (tmp_path / "splits" / "val.txt").write_text("a\n")
        with pytest.raises(FormatError):
            load_manifest(tmp_path)

    def test_missing_dataset_section_rejected(self, tmp_path):
        (tmp_path / "manifest.ini").write_text("[other]\nx = 1\n")
        with pytest.raises(FormatError):
            load_manifest(tmp_path)

    def test_loaded_sample_from_manifest(self, tmp_path):
        self.build(tmp_path)
        m = load_manifest(tmp_path)
        s = load_sample(m, "a")
        assert s.labels.shape == (6, 6)


class TestResize:
    def test_bilinear_identity_is_bitwise(self):
        rng = np.random.default_rng(3)
        arr = rng.standard_normal((3, 5, 7)).astype(np.float32)
        assert np.array_equal(resize_bilinear(arr, 5, 7), arr)

    def test_bilinear_upscale_matches_shared_convention(self):
        rng = np.random.default_rng(4)
        arr = rng.standard_normal((2, 3, 4))
        got = resize_bilinear(arr, 6, 8)
        want = oracles.upsample_bilinear_oracle(arr[None], 6, 8)[0]
        assert np.allclose(got, want, rtol=0, atol=1e-12)

    def test_bilinear_downscale_of_constant_is_exact(self):
        arr = np.full((1, 8, 8), 0.37, dtype=np.float32)
        assert np.all(resize_bilinear(arr, 3, 5) == np.float32(0.37))

    def test_nearest_identity(self):
        rng = np.random.default_rng(5)
        labels = rng.integers(0, 4, size=(6, 5))
        assert np.array_equal(resize_nearest(labels, 6, 5), labels)

    def test_nearest_downscale_picks_expected_rows(self):
        labels = np.arange(16).reshape(4, 4)
        out = resize_nearest(labels, 2, 2)
        # centers map to source coordinates 0.5 and 2.5 -> indexes 1 and 3
        assert np.array_equal(out, labels[np.ix_([1, 3], [1, 3])])


def make_sample(rng, size=12):
    rgb = rng.random((3, size, size)).astype(np.float32)
    depth = rng.random((1, size, size)).astype(np.float32)
    labels = rng.integers(0, 3, size=(size, size)).astype(np.int64)
    return RgbdSample(rgb=rgb, depth=depth, labels=labels)


class TestAugment:
    def test_identity_draw_leaves_sample_unchanged(self):
        rng = np.random.default_rng(6)
        s = make_sample(rng)
        cfg = AugmentConfig(out_h=12, out_w=12, scale_range=(1.0, 1.0),
                            flip_prob=0.0)
        out = augment_sample(s, cfg, np.random.default_rng(0))
        assert np.array_equal(out.rgb, s.rgb)
        assert np.array_equal(out.depth, s.depth)
        assert np.array_equal(out.labels, s.labels)

    def test_forced_flip_twice_restores_original(self):
        rng = np.random.default_rng(7)
        s = make_sample(rng)
        cfg = AugmentConfig(out_h=12, out_w=12, scale_range=(1.0, 1.0),
                            flip_prob=1.0)
        once = augment_sample(s, cfg, np.random.default_rng(1))
        twice = augment_sample(once, cfg, np.random.default_rng(2))
        assert np.array_equal(twice.rgb, s.rgb)
        assert np.array_equal(twice.depth, s.depth)
        assert np.array_equal(twice.labels, s.labels)

    def test_labels_stay_in_original_alphabet_plus_void(self):
        rng = np.random.default_rng(8)
        s = make_sample(rng, size=16)
        original = set(np.unique(s.labels))
        cfg = AugmentConfig(out_h=16, out_w=16)
        for k in range(20):
            out = augment_sample(s, cfg, np.random.default_rng(k))
            assert set(np.unique(out.labels)) <= original | {255}

    def test_translation_moves_all_three_maps_together(self):
        rng = np.random.default_rng(9)
        s = make_sample(rng, size=10)
        s.labels[:] = 0
        s.labels[4, 7] = 2  # unique tag pixel
        s.rgb[:, 4, 7] = 0.123
        s.depth[:, 4, 7] = 0.456
        cfg = AugmentConfig(out_h=6, out_w=6, scale_range=(1.0, 1.0),
                            flip_prob=0.0)
        for k in range(10):
            out = augment_sample(s, cfg, np.random.default_rng(k))
            hits = np.argwhere(out.labels == 2)
            for (y, x) in hits:
                assert np.all(out.rgb[:, y, x] == np.float32(0.123))
                assert np.all(out.depth[:, y, x] == np.float32(0.456))

    def test_shrunk_image_pads_with_void_and_zero(self):
        rng = np.random.default_rng(10)
        s = make_sample(rng, size=12)
        cfg = AugmentConfig(out_h=12, out_w=12, scale_range=(0.5, 0.5),
                            flip_prob=0.0)
        out = augment_sample(s, cfg, np.random.default_rng(0))
        assert out.labels.shape == (12, 12)
        assert np.all(out.labels[6:, :] == 255)
        assert np.all(out.labels[:, 6:] == 255)
        assert np.all(out.rgb[:, 6:, :] == 0.0)
        assert np.all(out.depth[:, :, 6:] == 0.0)

    def test_integer_seed_is_accepted_and_reproducible(self):
        rng = np.random.default_rng(11)
        s = make_sample(rng)
        cfg = AugmentConfig(out_h=8, out_w=8)
        a = augment_sample(s, cfg, 42)
        b = augment_sample(s, cfg, 42)
        assert np.array_equal(a.rgb, b.rgb)
        assert np.array_equal(a.labels, b.labels)


class TestRgbdSample:
    def test_shape_agreement_enforced(self):
        with pytest.raises(ContractError):
            RgbdSample(rgb=np.zeros((3, 4, 4), np.float32),
                       depth=np.zeros((1, 5, 4), np.float32),
                       labels=np.zeros((4, 4), np.int64))

    def test_non_finite_depth_rejected(self):
        depth = np.zeros((1, 2, 2), np.float32)
        depth[0, 0, 0] = np.nan
        with pytest.raises(ContractError):
            RgbdSample(rgb=np.zeros((3, 2, 2), np.float32), depth=depth,
                       labels=np.zeros((2, 2), np.int64))
