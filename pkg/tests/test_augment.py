import numpy as np
import pytest

from implant_depth.augment import (DetectorAugment, apply_detector_augment,
                                   augment_depth_sample,
                                   augment_detector_sample, derive_seed,
                                   draw_detector_augment, map_coordinate,
                                   resize_image)


class TestDeriveSeed:
    def test_stable(self):
        assert derive_seed(1, 2, 3) == derive_seed(1, 2, 3)

    def test_sensitive_to_each_part(self):
        base = derive_seed(1, 2, 3)
        assert base != derive_seed(2, 2, 3)
        assert base != derive_seed(1, 3, 3)
        assert base != derive_seed(1, 2, 4)

    def test_fits_in_63_bits(self):
        for parts in [(0, 0, 0), (2 ** 31, 5, 7), (-3, 1, 2)]:
            assert 0 <= derive_seed(*parts) < 2 ** 63


class TestResize:
    def test_identity(self):
        img = np.random.default_rng(0).uniform(0, 1, (32, 32)).astype(np.float32)
        out = resize_image(img, 32, 32)
        assert np.array_equal(out, img)

    def test_coordinate_mapping_round_trips(self):
        x = 13.25
        y = map_coordinate(x, 64, 128)
        assert map_coordinate(y, 128, 64) == pytest.approx(x)


class TestDetectorAugment:
    def test_identity_params(self):
        img = np.random.default_rng(1).uniform(0, 1, (64, 64)).astype(np.float32)
        out, pos = apply_detector_augment(img, (20.0, 30.0),
                                          DetectorAugment.identity(64))
        assert np.array_equal(out, img)
        assert pos == (20.0, 30.0)

    def test_flip_only(self):
        img = np.random.default_rng(2).uniform(0, 1, (64, 64)).astype(np.float32)
        params = DetectorAugment(crop_origin=(0, 0), crop_size=64, scale=1.0,
                                 flip=True)
        out, (row, col) = apply_detector_augment(img, (20.0, 30.0), params)
        assert np.array_equal(out, img[:, ::-1])
        assert row == 20.0
        assert col == 64 - 1 - 30.0

    def test_position_stays_in_bounds(self):
        rng = np.random.default_rng(3)
        img = rng.uniform(0, 1, (64, 64)).astype(np.float32)
        for draw in range(1000):
            pos = (float(rng.uniform(0, 63.999)), float(rng.uniform(0, 63.999)))
            out, (row, col) = augment_detector_sample(img, pos, seed=draw)
            assert out.shape == (64, 64)
            assert 0.0 <= row <= 63.0
            assert 0.0 <= col <= 63.0

    def test_deterministic_given_seed(self):
        img = np.random.default_rng(4).uniform(0, 1, (64, 64)).astype(np.float32)
        a_img, a_pos = augment_detector_sample(img, (10.0, 50.0), seed=99)
        b_img, b_pos = augment_detector_sample(img, (10.0, 50.0), seed=99)
        assert np.array_equal(a_img, b_img)
        assert a_pos == b_pos

    def test_crop_keeps_bright_spot_near_position(self):
        # a bright dot at the annotated position must survive augmentation
        img = np.zeros((64, 64), dtype=np.float32)
        img[40, 12] = 1.0
        for seed in range(50):
            out, (row, col) = augment_detector_sample(img, (40.0, 12.0), seed=seed)
            peak = np.unravel_index(np.argmax(out), out.shape)
            assert abs(peak[0] - row) <= 2.0
            assert abs(peak[1] - col) <= 2.0

    def test_draw_ranges(self):
        for seed in range(200):
            params = draw_detector_augment(64, (32.0, 32.0), seed)
            assert 0.7 * 64 - 1 <= params.crop_size <= 64
            assert 0.8 <= params.scale <= 1.2


class TestDepthAugment:
    def test_flip_is_involution(self, phantom):
        voxels = phantom.volume.voxels
        flipped = np.ascontiguousarray(voxels[:, :, ::-1])
        back = np.ascontiguousarray(flipped[:, :, ::-1])
        assert np.array_equal(back, voxels)

    def test_flip_probability_half(self, phantom):
        voxels = phantom.volume.voxels
        flips = sum(
            not np.array_equal(augment_depth_sample(voxels, seed), voxels)
            for seed in range(200)
        )
        assert 60 < flips < 140

    def test_reflection_arithmetic(self, phantom):
        voxels = phantom.volume.voxels
        for seed in range(20):
            out = augment_depth_sample(voxels, seed)
            if np.array_equal(out, voxels):
                continue
            d, h, w = 10, 20, 5
            assert out[d, h, w] == voxels[d, h, voxels.shape[2] - 1 - w]

    def test_interval_untouched_by_design(self, phantom):
        # the augmentation only returns voxels: the interval cannot change
        out = augment_depth_sample(phantom.volume.voxels, seed=1)
        assert out.shape == phantom.volume.voxels.shape

    def test_same_seed_twice_is_involution(self, phantom):
        voxels = phantom.volume.voxels
        for seed in range(10):
            once = augment_depth_sample(voxels, seed)
            twice = augment_depth_sample(once, seed)
            assert np.array_equal(twice, voxels)
