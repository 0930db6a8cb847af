import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crowdnms.geometry import (
    Box,
    FeatureGrid,
    RoiFeature,
    ScoredProposal,
    boxes_to_array,
    gt_occlusion,
    iou,
    iou_matrix,
    roi_align,
)

from .conftest import make_box
from .oracles import iou_xywh, roi_align_ref

finite_coord = st.floats(-200, 200, allow_nan=False)
finite_size = st.floats(0.5, 150, allow_nan=False)


class TestBox:
    def test_derived_fields(self):
        b = make_box(2, 3, 4, 5)
        assert b.x2 == 6 and b.y2 == 8 and b.area == 20
        assert np.array_equal(b.as_array(), np.array([2.0, 3.0, 4.0, 5.0]))

    @pytest.mark.parametrize("kw", [
        dict(x=0.0, y=0.0, w=0.0, h=1.0),
        dict(x=0.0, y=0.0, w=1.0, h=-2.0),
        dict(x=float("nan"), y=0.0, w=1.0, h=1.0),
        dict(x=0.0, y=float("inf"), w=1.0, h=1.0),
    ])
    def test_rejects_degenerate(self, kw):
        with pytest.raises(ValueError):
            Box(**kw)


class TestScoredProposal:
    @pytest.mark.parametrize("score", [-0.01, 1.01, float("nan")])
    def test_rejects_bad_score(self, score):
        with pytest.raises(ValueError):
            ScoredProposal(box=make_box(0, 0, 1, 1), score=score, image_id="a")

    def test_accepts_bounds(self):
        ScoredProposal(box=make_box(0, 0, 1, 1), score=0.0, image_id="a")
        ScoredProposal(box=make_box(0, 0, 1, 1), score=1.0, image_id="a")


class TestIoU:
    def test_hand_cases(self):
        # identical boxes
        assert iou(make_box(0, 0, 10, 10), make_box(0, 0, 10, 10)) == 1.0
        # disjoint
        assert iou(make_box(0, 0, 10, 10), make_box(20, 0, 10, 10)) == 0.0
        # touching edges count as no overlap
        assert iou(make_box(0, 0, 10, 10), make_box(10, 0, 10, 10)) == 0.0
        # half horizontal shift: inter=50, union=150
        assert iou(make_box(0, 0, 10, 10), make_box(5, 0, 10, 10)) == pytest.approx(1 / 3)
        # containment: 5x5 inside 10x10 -> 25/100
        assert iou(make_box(0, 0, 10, 10), make_box(2, 2, 5, 5)) == pytest.approx(0.25)

    @given(
        ax=finite_coord, ay=finite_coord, aw=finite_size, ah=finite_size,
        bx=finite_coord, by=finite_coord, bw=finite_size, bh=finite_size,
    )
    @settings(max_examples=300, deadline=None)
    def test_matches_reference_and_properties(self, ax, ay, aw, ah, bx, by, bw, bh):
        a, b = make_box(ax, ay, aw, ah), make_box(bx, by, bw, bh)
        v = iou(a, b)
        assert v == pytest.approx(iou_xywh((ax, ay, aw, ah), (bx, by, bw, bh)), abs=1e-12)
        assert 0.0 <= v <= 1.0
        assert iou(b, a) == pytest.approx(v, abs=1e-12)
        assert iou(a, a) == pytest.approx(1.0)

    def test_matrix_matches_pairwise(self, rng):
        boxes = [make_box(*rng.uniform(0, 50, 2), *rng.uniform(2, 30, 2)) for _ in range(12)]
        m = iou_matrix(boxes)
        assert m.shape == (12, 12)
        for i in range(12):
            for j in range(12):
                assert m[i, j] == pytest.approx(iou(boxes[i], boxes[j]), abs=1e-12)

    def test_boxes_to_array(self):
        arr = boxes_to_array([make_box(1, 2, 3, 4), make_box(5, 6, 7, 8)])
        assert np.array_equal(arr, np.array([[1, 2, 3, 4], [5, 6, 7, 8]], dtype=float))


class TestGtOcclusion:
    def test_no_neighbours(self):
        assert gt_occlusion(make_box(0, 0, 10, 10), []) == 0.0

    def test_takes_max_over_neighbours(self):
        g = make_box(0, 0, 10, 10)
        others = [make_box(5, 0, 10, 10), make_box(2, 2, 5, 5)]
        expected = max(iou(g, o) for o in others)
        assert gt_occlusion(g, others) == pytest.approx(expected)


class TestRoiAlign:
    def _grid(self, rng, c=3, h=16, w=20, stride=8.0):
        return FeatureGrid(values=rng.normal(size=(c, h, w)), stride=stride)

    def test_matches_naive_bilinear(self, rng):
        fg = self._grid(rng)
        for _ in range(25):
            roi = make_box(rng.uniform(-30, 150), rng.uniform(-30, 110),
                           rng.uniform(4, 80), rng.uniform(4, 80))
            if roi.x >= fg.image_width or roi.y >= fg.image_height or roi.x2 <= 0 or roi.y2 <= 0:
                continue
            out = roi_align(fg, roi, out_size=7)
            ref = roi_align_ref(fg.values, fg.stride, (roi.x, roi.y, roi.w, roi.h), 7)
            assert out.grid.shape == (3, 7, 7)
            np.testing.assert_allclose(out.grid, ref, atol=1e-9)

    def test_constant_grid_interior_roi(self, rng):
        fg = FeatureGrid(values=np.full((2, 16, 16), 3.5), stride=8.0)
        out = roi_align(fg, make_box(16, 16, 64, 64), out_size=5)
        np.testing.assert_allclose(out.grid, 3.5)

    def test_empty_roi_raises(self, rng):
        fg = self._grid(rng)
        with pytest.raises(ValueError, match="empty ROI"):
            roi_align(fg, make_box(fg.image_width + 5, 0, 10, 10))

    def test_partially_outside_is_fine(self, rng):
        fg = self._grid(rng)
        out = roi_align(fg, make_box(-5, -5, 20, 20), out_size=4)
        assert np.isfinite(out.grid).all()


class TestContainers:
    def test_feature_grid_validation(self):
        with pytest.raises(ValueError):
            FeatureGrid(values=np.zeros((4, 4)), stride=8.0)
        with pytest.raises(ValueError):
            FeatureGrid(values=np.zeros((1, 4, 4)), stride=0.0)
        with pytest.raises(ValueError):
            FeatureGrid(values=np.full((1, 4, 4), np.nan), stride=8.0)

    def test_feature_grid_coerces_dtype(self):
        fg = FeatureGrid(values=np.zeros((1, 4, 4), dtype=np.float32), stride=2.0)
        assert fg.values.dtype == np.float64
        assert fg.image_width == 8.0 and fg.image_height == 8.0

    def test_roi_feature_validation(self):
        RoiFeature(grid=np.zeros((2, 3, 3)))
        with pytest.raises(ValueError):
            RoiFeature(grid=np.zeros((2, 3, 4)))
        with pytest.raises(ValueError):
            RoiFeature(grid=np.full((2, 3, 3), np.inf))
