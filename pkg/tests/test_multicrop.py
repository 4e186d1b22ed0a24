"""View sampling and bilinear resizing tests."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from silc.multicrop import (
    CropSpec,
    crop_resize_batch,
    resize_bilinear,
    sample_crop_rect,
    sample_views,
)
from silc.rng import Stream


def _image(seed=0, s=64):
    return Stream(seed).uniform(s * s * 3).reshape(s, s, 3).astype(np.float32)


class TestCropSpec:
    def test_defaults(self):
        spec = CropSpec()
        assert spec.n_global == 2 and spec.n_local == 8
        assert spec.global_area == (0.4, 1.0) and spec.local_area == (0.05, 0.4)

    def test_invalid_area_range(self):
        with pytest.raises(ValueError, match="area range"):
            CropSpec(global_area=(0.0, 1.0))
        with pytest.raises(ValueError, match="area range"):
            CropSpec(local_area=(0.5, 1.5))

    def test_local_smaller_than_global(self):
        with pytest.raises(ValueError, match="local_size"):
            CropSpec(global_size=16, local_size=16)


class TestResizeBilinear:
    def test_same_size_is_identity(self):
        img = _image()
        np.testing.assert_allclose(resize_bilinear(img, 64), img, atol=1e-6)

    def test_constant_image_stays_constant(self):
        img = np.full((16, 16, 3), 0.37, dtype=np.float32)
        out = resize_bilinear(img, 5)
        np.testing.assert_allclose(out, 0.37, atol=1e-6)

    def test_checkerboard_2x2_to_4x4_matches_hand_oracle(self):
        img = np.array([[0.0, 1.0], [1.0, 0.0]], dtype=np.float32)[:, :, None]

        # independent oracle: explicit half-pixel-center bilinear loops
        def oracle(src, t):
            s = src.shape[0]
            out = np.zeros((t, t))
            for i in range(t):
                for j in range(t):
                    sy = min(max((i + 0.5) * s / t - 0.5, 0), s - 1)
                    sx = min(max((j + 0.5) * s / t - 0.5, 0), s - 1)
                    y0, x0 = int(np.floor(sy)), int(np.floor(sx))
                    y1, x1 = min(y0 + 1, s - 1), min(x0 + 1, s - 1)
                    wy, wx = sy - y0, sx - x0
                    out[i, j] = (
                        src[y0, x0] * (1 - wy) * (1 - wx)
                        + src[y0, x1] * (1 - wy) * wx
                        + src[y1, x0] * wy * (1 - wx)
                        + src[y1, x1] * wy * wx
                    )
            return out

        out = resize_bilinear(img, 4)[:, :, 0]
        np.testing.assert_allclose(out, oracle(img[:, :, 0], 4), atol=1e-6)

    def test_target_validated(self):
        with pytest.raises(ValueError):
            resize_bilinear(_image(), 0)


class TestSampleViews:
    def test_full_area_unit_aspect_equals_resize(self):
        # forcing area fraction 1.0 leaves only the unit aspect feasible
        img = _image(3)
        spec = CropSpec(global_area=(1.0, 1.0))
        views = sample_views(img, spec, seed=11)
        np.testing.assert_allclose(
            views["global"][0], resize_bilinear(img, spec.global_size), atol=1e-6
        )

    def test_same_seed_bit_identical(self):
        img = _image(4)
        a = sample_views(img, CropSpec(), seed=5)
        b = sample_views(img, CropSpec(), seed=5)
        assert np.array_equal(a["contrastive"], b["contrastive"])
        for va, vb in zip(a["global"] + a["local"], b["global"] + b["local"]):
            assert np.array_equal(va, vb)

    def test_view_counts_and_sizes(self):
        spec = CropSpec()
        views = sample_views(_image(5), spec, seed=0)
        assert len(views["global"]) == spec.n_global
        assert len(views["local"]) == spec.n_local
        assert views["global"][0].shape == (32, 32, 3)
        assert views["local"][0].shape == (16, 16, 3)
        assert views["contrastive"].shape == (32, 32, 3)

    def test_too_small_image_rejected(self):
        with pytest.raises(ValueError, match="smaller than"):
            sample_views(_image(0, s=8), CropSpec(), seed=0)

    def test_pixels_stay_in_unit_interval(self):
        views = sample_views(_image(6), CropSpec(), seed=9)
        for v in [views["contrastive"]] + views["global"] + views["local"]:
            assert v.min() >= -1e-6 and v.max() <= 1 + 1e-6


class TestAreaStatistics:
    def test_global_area_uniform_mean(self):
        # 10k draws: every ratio in range, mean of U(0.4, 1.0) ~= 0.7
        stream = Stream(99)
        areas = np.array(
            [np.prod(sample_crop_rect(stream, 64, (0.4, 1.0))[2:]) / 64 / 64 for _ in range(10_000)]
        )
        assert ((areas >= 0.4 - 1e-9) & (areas <= 1.0 + 1e-9)).all()
        assert abs(areas.mean() - 0.7) < 0.02

    def test_rects_inside_image_100k_draws(self):
        stream = Stream(123)
        for area in ((0.05, 0.4), (0.4, 1.0)):
            for _ in range(50_000):
                y0, x0, h, w = sample_crop_rect(stream, 64, area)
                assert y0 >= -1e-9 and x0 >= -1e-9
                assert y0 + h <= 64 + 1e-9 and x0 + w <= 64 + 1e-9

    @given(st.integers(0, 2**32), st.sampled_from([(0.05, 0.4), (0.4, 1.0), (0.3, 0.3)]))
    @settings(max_examples=200, deadline=None)
    def test_area_ratio_in_declared_range(self, seed, area_range):
        y0, x0, h, w = sample_crop_rect(Stream(seed), 48, area_range)
        ratio = h * w / 48.0 / 48.0
        lo, hi = area_range
        assert lo - 1e-9 <= ratio <= hi + 1e-9


class TestCropResizeBatch:
    def test_batched_matches_single(self):
        imgs = np.stack([_image(i) for i in range(3)])
        rects = np.array([[0.0, 0.0, 64.0, 64.0], [8.0, 4.0, 32.0, 40.0], [1.5, 2.5, 20.0, 20.0]])
        batched = crop_resize_batch(imgs, rects, 16)
        for i in range(3):
            single = crop_resize_batch(imgs[i : i + 1], rects[i : i + 1], 16)[0]
            np.testing.assert_array_equal(batched[i], single)
