"""Feature extraction, coordinate channels, and bilinear ROI pooling."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sorank import rng as rng_mod
from sorank.backbone import (BACKBONE_STRIDE, Backbone, DegenerateBoxError,
                             FeatureMap, clip_box, make_coord_maps, roi_pool,
                             roi_pool_many, strip_position)
from sorank.tensor import ShapeError, Tensor, concat


class TestCoordMaps:
    def test_two_columns(self):
        grid = make_coord_maps(2, 3).data
        np.testing.assert_allclose(grid[0, 0], [0.25, 0.75])

    def test_single_row_y(self):
        grid = make_coord_maps(4, 1).data
        np.testing.assert_allclose(grid[1], 0.5)

    def test_wide_map_first_column(self):
        grid = make_coord_maps(640, 2).data
        assert grid[0, 0, 0] == pytest.approx(0.5 / 640, abs=1e-9)

    def test_x_then_y_ordering(self):
        grid = make_coord_maps(5, 4).data
        # channel 0 varies along columns, channel 1 along rows
        assert np.all(np.diff(grid[0], axis=1) > 0)
        np.testing.assert_allclose(np.diff(grid[0], axis=0), 0.0)
        assert np.all(np.diff(grid[1], axis=0) > 0)


class TestBackbone:
    def test_output_shape_and_stride(self):
        bb = Backbone(rng_mod.stream(0, "init", "backbone"))
        fmap = bb(Tensor(np.zeros((3, 72, 96), dtype=np.float32)))
        assert fmap.tensor.shape == (34, 18, 24)
        assert fmap.stride == BACKBONE_STRIDE == 4
        assert fmap.n_semantic == 32

    def test_coordinate_channels_content_independent(self):
        bb = Backbone(rng_mod.stream(0, "init", "backbone"))
        gen = np.random.default_rng(0)
        a = bb(Tensor(gen.random((3, 24, 32), dtype=np.float32)))
        b = bb(Tensor(gen.random((3, 24, 32), dtype=np.float32)))
        np.testing.assert_array_equal(a.tensor.data[-2:], b.tensor.data[-2:])
        want = make_coord_maps(8, 6).data
        np.testing.assert_array_equal(a.tensor.data[-2:], want)

    def test_zero_image_finite(self):
        bb = Backbone(rng_mod.stream(0, "init", "backbone"))
        fmap = bb(Tensor(np.zeros((3, 24, 32), dtype=np.float32)))
        assert np.all(np.isfinite(fmap.tensor.data))

    def test_rejects_indivisible_size(self):
        bb = Backbone(rng_mod.stream(0, "init", "backbone"))
        with pytest.raises(ShapeError):
            bb(Tensor(np.zeros((3, 70, 96), dtype=np.float32)))

    def test_batched_matches_single(self):
        bb = Backbone(rng_mod.stream(0, "init", "backbone"))
        gen = np.random.default_rng(1)
        imgs = gen.random((2, 3, 24, 32), dtype=np.float32)
        batch = bb(Tensor(imgs)).tensor.data
        for i in range(2):
            single = bb(Tensor(imgs[i])).tensor.data
            np.testing.assert_allclose(batch[i], single, atol=1e-6)


def const_fmap(c=1, h_f=6, w_f=8, value=3.0):
    """Feature map with constant semantic channels plus coordinate maps."""
    sem = Tensor(np.full((c, h_f, w_f), value, dtype=np.float64))
    coords = make_coord_maps(w_f, h_f, dtype=np.float64)
    return FeatureMap(tensor=concat([sem, coords], axis=0), stride=4,
                      n_semantic=c)


class TestRoiPool:
    def test_constant_channel_pools_to_constant(self):
        fmap = const_fmap(value=3.0)
        out = roi_pool_many(fmap, [[0.0, 0.0, 32.0, 24.0]], 4, 32.0, 24.0)
        np.testing.assert_allclose(out.data[0, 0], 3.0, atol=1e-9)

    def test_x_channel_monotone_along_rows(self):
        fmap = const_fmap()
        out = roi_pool_many(fmap, [[4.0, 2.0, 28.0, 20.0]], 5, 32.0, 24.0)
        xs = out.data[0, 1]     # first coordinate channel
        assert np.all(np.diff(xs, axis=1) >= 0)

    def test_position_preserved_within_sampling_error(self):
        fmap = const_fmap(h_f=18, w_f=24)
        gen = np.random.default_rng(2)
        p = 7
        for _ in range(50):
            x1 = gen.uniform(0, 60)
            y1 = gen.uniform(0, 40)
            w = gen.uniform(8, 30)
            h = gen.uniform(8, 26)
            box = [x1, y1, min(x1 + w, 96.0), min(y1 + h, 72.0)]
            out = roi_pool_many(fmap, [box], p, 96.0, 72.0).data[0]
            cx = 0.5 * (box[0] + box[2]) / 96.0
            cy = 0.5 * (box[1] + box[3]) / 72.0
            bw = (box[2] - box[0])
            bh = (box[3] - box[1])
            assert abs(out[1].mean() - cx) <= bw / (96.0 * p) + 1e-9
            assert abs(out[2].mean() - cy) <= bh / (72.0 * p) + 1e-9

    def test_translation_changes_coordinate_channels(self):
        fmap = const_fmap()
        a = roi_pool_many(fmap, [[4.0, 4.0, 16.0, 16.0]], 4, 32.0, 24.0).data
        b = roi_pool_many(fmap, [[12.0, 4.0, 24.0, 16.0]], 4, 32.0, 24.0).data
        np.testing.assert_allclose(a[0, 0], b[0, 0], atol=1e-9)  # semantic
        assert np.abs(a[0, 1] - b[0, 1]).max() > 1e-3             # X coords

    def test_matches_naive_bilinear_loop(self):
        gen = np.random.default_rng(3)
        fm = Tensor(gen.normal(size=(3, 6, 8)))
        fmap = FeatureMap(tensor=fm, stride=4, n_semantic=3)
        box = [3.0, 2.0, 27.0, 21.0]
        p = 4
        out = roi_pool_many(fmap, [box], p, 32.0, 24.0).data[0]
        for c in range(3):
            for gy in range(p):
                for gx in range(p):
                    x = box[0] + (gx + 0.5) / p * (box[2] - box[0])
                    y = box[1] + (gy + 0.5) / p * (box[3] - box[1])
                    xf = x / 4 - 0.5
                    yf = y / 4 - 0.5
                    x0 = min(max(int(np.floor(xf)), 0), 6)
                    y0 = min(max(int(np.floor(yf)), 0), 4)
                    x1, y1 = x0 + 1, y0 + 1
                    wx, wy = xf - x0, yf - y0
                    want = ((1 - wy) * (1 - wx) * fm.data[c, y0, x0]
                            + (1 - wy) * wx * fm.data[c, y0, x1]
                            + wy * (1 - wx) * fm.data[c, y1, x0]
                            + wy * wx * fm.data[c, y1, x1])
                    assert out[c, gy, gx] == pytest.approx(want, abs=1e-10)

    def test_gradient_through_pooling(self):
        from sorank.gradcheck import grad_check
        from sorank.tensor import tsum
        gen = np.random.default_rng(4)
        fm = Tensor(gen.normal(size=(2, 6, 8)), requires_grad=True)
        fmap = FeatureMap(tensor=fm, stride=4, n_semantic=2)
        probe = Tensor(gen.normal(size=(2, 2, 4, 4)))
        boxes = [[2.0, 3.0, 20.0, 17.0], [8.0, 1.0, 30.0, 22.0]]
        rep = grad_check(
            lambda: tsum(roi_pool_many(fmap, boxes, 4, 32.0, 24.0) * probe),
            {"fmap": fm})
        assert rep.worst() <= 1e-4

    def test_degenerate_box_rejected(self):
        fmap = const_fmap()
        with pytest.raises(DegenerateBoxError):
            roi_pool_many(fmap, [[40.0, 5.0, 50.0, 15.0]], 4, 32.0, 24.0)

    def test_single_box_wrapper(self):
        fmap = const_fmap()
        roi = roi_pool(fmap, (2.0, 2.0, 20.0, 18.0), 4, 32.0, 24.0,
                       proposal_id=7)
        assert roi.proposal_id == 7
        assert roi.tensor.shape == (3, 4, 4)


class TestStripPosition:
    def test_keeps_first_channels(self):
        gen = np.random.default_rng(5)
        roi = Tensor(gen.normal(size=(2, 6, 4, 4)))
        out = strip_position(roi, 4)
        np.testing.assert_array_equal(out.data, roi.data[:, :4])

    def test_partition_reconstructs(self):
        from sorank.tensor import narrow
        gen = np.random.default_rng(6)
        roi = Tensor(gen.normal(size=(3, 5, 4, 4)))
        sem = strip_position(roi, 3)
        pos = narrow(roi, 1, 3, 2)
        back = concat([sem, pos], axis=1)
        np.testing.assert_array_equal(back.data, roi.data)

    def test_independent_of_coordinate_content(self):
        gen = np.random.default_rng(7)
        roi = gen.normal(size=(2, 6, 4, 4))
        zeroed = roi.copy()
        zeroed[:, 4:] = 0.0
        a = strip_position(Tensor(roi), 4).data
        b = strip_position(Tensor(zeroed), 4).data
        np.testing.assert_array_equal(a, b)


def test_clip_box():
    assert clip_box((-5.0, 2.0, 40.0, 30.0), 32.0, 24.0) == (0.0, 2.0, 32.0,
                                                             24.0)


@settings(max_examples=40, deadline=None)
@given(st.integers(min_value=0, max_value=2 ** 31))
def test_position_preservation_random_boxes(seed):
    gen = np.random.default_rng(seed)
    fmap = const_fmap(h_f=18, w_f=24)
    p = 7
    x1 = gen.uniform(0, 80)
    y1 = gen.uniform(0, 56)
    box = [x1, y1, x1 + gen.uniform(6, 96 - x1 - 0.01),
           y1 + gen.uniform(6, 72 - y1 - 0.01)]
    box[2] = min(box[2], 96.0)
    box[3] = min(box[3], 72.0)
    out = roi_pool_many(fmap, [box], p, 96.0, 72.0).data[0]
    cx = 0.5 * (box[0] + box[2]) / 96.0
    assert abs(out[1].mean() - cx) <= (box[2] - box[0]) / (96.0 * p) + 1e-9
