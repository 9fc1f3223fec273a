"""Horn-Schunck estimation, grayscale conversion, warping, color wheel."""

import numpy as np
import pytest

from flowcast.autodiff import Tensor
from flowcast.errors import NumericError, ShapeError
from flowcast.flow import (
    FlowField,
    estimate_flow_horn_schunck,
    flow_to_color,
    horn_schunck_energy,
    rgb_to_grayscale,
    warp_by_flow,
)


def gaussian_blob(width, height, cx, cy, sigma=4.0, peak=0.8):
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    return peak * np.exp(-(((xs - cx) ** 2 + (ys - cy) ** 2) / (2.0 * sigma**2)))


class TestRgbToGrayscale:
    def test_white_is_one(self):
        assert np.allclose(rgb_to_grayscale(np.ones((3, 2, 2))), 1.0)

    def test_pure_red(self):
        frame = np.zeros((3, 2, 2))
        frame[0] = 1.0
        np.testing.assert_allclose(rgb_to_grayscale(frame), 0.299)

    def test_gray_passthrough(self):
        frame = np.full((3, 4, 4), 0.37)
        np.testing.assert_allclose(rgb_to_grayscale(frame), 0.37)

    def test_shape_check(self):
        with pytest.raises(ShapeError):
            rgb_to_grayscale(np.zeros((4, 2, 2)))


class TestHornSchunck:
    def test_identical_frames_give_zero_flow(self, rng):
        frame = rng.random((10, 12))
        flow = estimate_flow_horn_schunck(frame, frame, 0.01, 20)
        np.testing.assert_array_equal(flow.u, 0.0)
        np.testing.assert_array_equal(flow.v, 0.0)

    def test_textureless_frames_give_zero_flow(self):
        a = np.full((8, 8), 0.5)
        b = np.full((8, 8), 0.5)
        flow = estimate_flow_horn_schunck(a, b, 0.01, 50)
        np.testing.assert_array_equal(flow.u, 0.0)
        np.testing.assert_array_equal(flow.v, 0.0)

    def test_translated_blob_endpoint_error(self):
        a = gaussian_blob(64, 32, 30.0, 16.0)
        b = gaussian_blob(64, 32, 31.0, 16.0)
        flow = estimate_flow_horn_schunck(a, b, smoothness=0.01, iterations=200)
        support = a > 0.1
        epe = np.hypot(flow.u - 1.0, flow.v)[support].mean()
        assert epe < 0.5

    def test_energy_non_increasing(self):
        a = gaussian_blob(32, 24, 14.0, 12.0)
        b = gaussian_blob(32, 24, 15.0, 13.0)
        _, energies = estimate_flow_horn_schunck(a, b, 0.01, 120, track_energy=True)
        for before, after in zip(energies, energies[1:]):
            assert after <= before + 1e-9

    def test_energy_of_truth_below_zero_flow(self):
        a = gaussian_blob(32, 24, 14.0, 12.0)
        b = gaussian_blob(32, 24, 15.0, 12.0)
        ones = np.ones_like(a)
        assert horn_schunck_energy(a, b, ones, 0.0 * ones, 0.01) < horn_schunck_energy(
            a, b, 0.0 * ones, 0.0 * ones, 0.01
        )

    def test_input_validation(self, rng):
        a = rng.random((8, 8))
        with pytest.raises(ShapeError):
            estimate_flow_horn_schunck(a, rng.random((8, 9)))
        with pytest.raises(ValueError):
            estimate_flow_horn_schunck(a * 3.0, a)
        with pytest.raises(ValueError):
            estimate_flow_horn_schunck(a, a, smoothness=0.0)
        bad = np.array(a)
        bad[0, 0] = np.nan
        with pytest.raises(NumericError):
            estimate_flow_horn_schunck(bad, a)


class TestWarpByFlow:
    def test_zero_flow_is_identity(self, rng):
        frame = rng.random((3, 6, 8))
        flow = FlowField(u=np.zeros((6, 8)), v=np.zeros((6, 8)))
        out = warp_by_flow(frame, flow)
        np.testing.assert_array_equal(out.data, frame)

    def test_uniform_shift_left(self, rng):
        frame = rng.random((1, 4, 6))
        flow = FlowField(u=np.ones((4, 6)), v=np.zeros((4, 6)))
        out = warp_by_flow(frame, flow)
        expected = frame[:, :, np.minimum(np.arange(6) + 1, 5)]
        np.testing.assert_array_equal(out.data, expected)

    def test_matches_bilinear_with_grid_plus_flow(self, rng):
        from flowcast.flow import identity_grid
        from flowcast.nn import bilinear_sample

        frame = rng.random((2, 5, 7))
        flow = FlowField(u=rng.standard_normal((5, 7)), v=rng.standard_normal((5, 7)))
        via_warp = warp_by_flow(frame, flow)
        coords = Tensor((identity_grid(5, 7) + flow.to_array())[None])
        via_sample = bilinear_sample(Tensor(frame[None]), coords)
        np.testing.assert_array_equal(via_warp.data, via_sample.data[0])


class TestFlowToColor:
    def test_zero_flow_is_white(self):
        img = flow_to_color(FlowField(u=np.zeros((3, 3)), v=np.zeros((3, 3))))
        np.testing.assert_array_equal(img.data, 1.0)

    def test_full_magnitude_rightward_is_red(self):
        u = np.full((2, 2), 2.5)
        img = flow_to_color(FlowField(u=u, v=np.zeros((2, 2))), max_magnitude=2.5)
        np.testing.assert_allclose(img.data[0], 1.0)
        np.testing.assert_allclose(img.data[1], 0.0, atol=1e-12)
        np.testing.assert_allclose(img.data[2], 0.0, atol=1e-12)

    def test_magnitudes_clamp_at_max(self):
        u = np.array([[10.0]])
        img = flow_to_color(FlowField(u=u, v=np.zeros((1, 1))), max_magnitude=1.0)
        np.testing.assert_allclose(img.data[:, 0, 0], [1.0, 0.0, 0.0], atol=1e-12)

    def test_values_within_unit_range(self, rng):
        flow = FlowField(u=rng.standard_normal((6, 6)) * 3, v=rng.standard_normal((6, 6)) * 3)
        img = flow_to_color(flow)
        assert img.data.min() >= 0.0 and img.data.max() <= 1.0
