"""PSNR and SSIM closed-form oracles."""

import math

import numpy as np
import pytest

from flowcast.errors import ShapeError
from flowcast.metrics import psnr, ssim


class TestPsnr:
    def test_closed_form_20db(self):
        a = np.zeros((4, 4))
        b = np.full((4, 4), 0.1)  # mse 0.01
        assert psnr(a, b, 1.0) == pytest.approx(20.0, abs=1e-9)

    def test_identical_images_infinite(self, rng):
        img = rng.random((3, 8, 8))
        assert psnr(img, img, 1.0) == math.inf

    def test_strictly_decreasing_in_mse(self, rng):
        base = rng.random((8, 8))
        values = [psnr(base, base + eps, 1.0) for eps in (0.01, 0.02, 0.05, 0.1, 0.2)]
        assert all(earlier > later for earlier, later in zip(values, values[1:]))

    def test_max_value_scaling(self):
        a, b = np.zeros((4, 4)), np.full((4, 4), 25.5)
        assert psnr(a, b, 255.0) == pytest.approx(20.0, abs=1e-9)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            psnr(np.zeros((2, 2)), np.zeros((3, 2)))


class TestSsim:
    def test_self_similarity_is_one(self, rng):
        img = rng.random((3, 32, 64))
        assert ssim(img, img, 1.0) == pytest.approx(1.0, abs=1e-12)

    def test_constant_zero_vs_one_closed_form(self):
        c1 = (0.01 * 1.0) ** 2
        expected = c1 / (1.0 + c1)
        a, b = np.zeros((16, 16)), np.ones((16, 16))
        assert ssim(a, b, 1.0) == pytest.approx(expected, abs=1e-9)

    def test_symmetry(self, rng):
        a, b = rng.random((20, 20)), rng.random((20, 20))
        assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-12)

    def test_bounded(self, rng):
        for _ in range(10):
            a, b = rng.random((16, 16)), rng.random((16, 16))
            s = ssim(a, b)
            assert -1.0 <= s <= 1.0

    def test_degrades_with_noise(self, rng):
        img = rng.random((24, 24))
        small = ssim(img, np.clip(img + 0.01 * rng.standard_normal(img.shape), 0, 1))
        large = ssim(img, np.clip(img + 0.3 * rng.standard_normal(img.shape), 0, 1))
        assert small > large

    def test_too_small_image_rejected(self):
        with pytest.raises(ShapeError):
            ssim(np.zeros((8, 8)), np.zeros((8, 8)))
