"""Warping: bit-exact identities, index oracles, simplex preservation."""

import numpy as np
import pytest

from warpvos import autodiff as ad
from warpvos.autodiff import Tensor, UsageError
from warpvos.geometry import (
    FlowField,
    flow_to_color,
    grid_sample_bilinear,
    identity_coords,
    resize_bilinear,
    upsample_bilinear,
    warp_image,
    warp_soft_mask,
)


class TestGridSample:
    def test_identity_coords_exact(self, rng):
        src = rng.standard_normal((3, 5, 7)).astype(np.float32)
        out = grid_sample_bilinear(Tensor(src), identity_coords(5, 7))
        assert np.array_equal(out.data, src)

    def test_integer_shift_matches_index_oracle(self, rng):
        src = rng.standard_normal((1, 4, 6)).astype(np.float32)
        coords = identity_coords(4, 6)
        coords[0] += 1  # sample one pixel to the right
        out = grid_sample_bilinear(Tensor(src), coords).data
        np.testing.assert_array_equal(out[0, :, :-1], src[0, :, 1:])
        np.testing.assert_array_equal(out[0, :, -1], src[0, :, -1])  # clamped border

    def test_half_pixel_average(self):
        src = np.array([[[1.0, 3.0]]], dtype=np.float32)
        coords = identity_coords(1, 2)
        coords[0] += 0.5
        out = grid_sample_bilinear(Tensor(src), coords).data
        np.testing.assert_allclose(out[0, 0, 0], 2.0)

    def test_nan_coords_rejected(self):
        coords = identity_coords(2, 2)
        coords[0, 0, 0] = np.nan
        with pytest.raises(UsageError):
            grid_sample_bilinear(Tensor(np.zeros((1, 2, 2))), coords)

    def test_gradient_wrt_source(self, f64):
        rng = np.random.default_rng(3)
        for _ in range(5):
            src = Tensor(rng.standard_normal((2, 5, 6)), requires_grad=True)
            coords = identity_coords(4, 5) + rng.uniform(-1.5, 1.5, size=(2, 4, 5))
            m = Tensor(rng.standard_normal((2, 4, 5)))
            err = ad.gradient_check(lambda: ad.tsum(ad.mul(grid_sample_bilinear(src, coords), m)), [src])
            assert err < 1e-4


class TestWarpImage:
    def test_zero_flow_is_bit_identity(self, rng):
        img = rng.random((3, 8, 10)).astype(np.float32)
        out = warp_image(img, FlowField.zero(8, 10))
        assert np.array_equal(out.data, img)

    def test_shape_mismatch(self, rng):
        with pytest.raises(ad.ShapeError):
            warp_image(rng.random((3, 8, 10)).astype(np.float32), FlowField.zero(6, 10))

    def test_constant_integer_translation_matches_rerender(self, rng):
        # scene = wide texture; frame t shows the window shifted by (2, 1)
        tex = rng.random((3, 20, 24)).astype(np.float32)
        frame_k = tex[:, 2:10, 3:15]
        frame_t = tex[:, 3:11, 5:17]
        # frame_t(p) = tex[p + (5,3)] = frame_k(p + (2,1)); backward flow = +(2,1)
        flow = FlowField(np.stack([np.full((8, 12), 2.0), np.full((8, 12), 1.0)]).astype(np.float32))
        out = warp_image(frame_k, flow).data
        np.testing.assert_allclose(out[:, :-1, :-2], frame_t[:, :-1, :-2], atol=1e-6)

    def test_composition_near_identity(self, rng):
        from scipy.ndimage import gaussian_filter

        img = gaussian_filter(rng.random((1, 24, 24)), sigma=(0, 2, 2)).astype(np.float32)
        u = gaussian_filter(rng.uniform(-2, 2, (24, 24)), 4).astype(np.float32)
        v = gaussian_filter(rng.uniform(-2, 2, (24, 24)), 4).astype(np.float32)
        f = FlowField(np.stack([u, v]))
        back = FlowField(np.stack([-u, -v]))
        twice = warp_image(warp_image(img, f), back).data
        inner = (slice(None), slice(2, -2), slice(2, -2))
        assert np.abs(twice[inner] - img[inner]).mean() < 0.05


class TestWarpSoftMask:
    def _soft(self, rng, k, h, w):
        logits = rng.standard_normal((k, h, w))
        e = np.exp(logits)
        return (e / e.sum(axis=0)).astype(np.float32)

    def test_zero_flow_identity(self, rng):
        soft = self._soft(rng, 3, 6, 6)
        out = warp_soft_mask(soft, FlowField.zero(6, 6)).data
        np.testing.assert_allclose(out, soft, atol=1e-6)

    def test_one_hot_integer_translation(self):
        soft = np.zeros((2, 5, 5), dtype=np.float32)
        soft[1, 1:3, 1:3] = 1.0
        soft[0] = 1.0 - soft[1]
        flow = FlowField(np.stack([np.full((5, 5), 1.0), np.zeros((5, 5))]).astype(np.float32))
        out = warp_soft_mask(soft, flow).data
        expected = np.zeros_like(soft[1])
        expected[1:3, 0:2] = 1.0  # content moved left by one
        np.testing.assert_allclose(out[1, :, :-1], expected[:, :-1], atol=1e-6)

    def test_simplex_preserved(self, rng):
        soft = self._soft(rng, 4, 7, 9)
        flow = FlowField(rng.uniform(-2, 2, (2, 7, 9)).astype(np.float32))
        out = warp_soft_mask(soft, flow).data
        assert out.min() >= 0
        np.testing.assert_allclose(out.sum(axis=0), 1.0, atol=1e-6)

    def test_non_normalized_rejected(self, rng):
        bad = rng.random((3, 4, 4)).astype(np.float32)
        with pytest.raises(UsageError):
            warp_soft_mask(bad, FlowField.zero(4, 4))


class TestResize:
    def test_upsample_matches_grid_sample(self, rng):
        x = rng.standard_normal((3, 5, 4)).astype(np.float32)
        fast = upsample_bilinear(Tensor(x), 2).data
        oy = (np.arange(10) + 0.5) / 2 - 0.5
        ox = (np.arange(8) + 0.5) / 2 - 0.5
        xs, ys = np.meshgrid(ox, oy, indexing="xy")
        ref = grid_sample_bilinear(Tensor(x), np.stack([xs, ys])).data
        np.testing.assert_allclose(fast, ref, atol=1e-6)

    def test_resize_identity(self, rng):
        x = rng.standard_normal((2, 6, 5)).astype(np.float32)
        np.testing.assert_allclose(resize_bilinear(Tensor(x), 6, 5).data, x, atol=1e-7)

    def test_resize_grad(self, f64):
        rng = np.random.default_rng(5)
        x = Tensor(rng.standard_normal((2, 4, 5)), requires_grad=True)
        m = Tensor(rng.standard_normal((2, 8, 10)))
        err = ad.gradient_check(lambda: ad.tsum(ad.mul(upsample_bilinear(x, 2), m)), [x])
        assert err < 1e-4


class TestFlowField:
    def test_zero_identity_invariant(self):
        f = FlowField.zero(4, 4)
        assert f.magnitude().max() == 0

    def test_nonfinite_rejected(self):
        with pytest.raises(UsageError):
            FlowField(np.full((2, 3, 3), np.inf, dtype=np.float32))

    def test_color_wheel_shape(self, rng):
        f = FlowField(rng.uniform(-3, 3, (2, 5, 6)).astype(np.float32))
        img = flow_to_color(f)
        assert img.shape == (5, 6, 3) and img.dtype == np.uint8
