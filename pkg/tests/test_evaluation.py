import numpy as np
import pytest

from crowdnms.evaluation import (
    DEFAULT_BUCKETS,
    DEFAULT_THRESHOLDS,
    EvalConfig,
    average_precision,
    evaluate,
    f1_by_occlusion,
    match_detections,
    threshold_stats,
)
from crowdnms.scene import GroundTruthObject

from .conftest import make_box, make_prop
from .oracles import ap_cutoff_ref, match_ref


def _gt(x, y, w, h, image_id="img", object_id=0):
    return GroundTruthObject(image_id=image_id, object_id=object_id, box=make_box(x, y, w, h))


def _random_instance(rng, max_dets=10, max_gts=5, image_id="img"):
    gts, dets = [], []
    for k in range(int(rng.integers(1, max_gts + 1))):
        gts.append(_gt(rng.uniform(0, 60), rng.uniform(0, 60),
                       rng.uniform(8, 25), rng.uniform(8, 25), image_id, k))
    for _ in range(int(rng.integers(0, max_dets + 1))):
        g = gts[int(rng.integers(0, len(gts)))].box
        dets.append(make_prop(
            g.x + rng.normal(0, 6), g.y + rng.normal(0, 6),
            max(4.0, g.w + rng.normal(0, 5)), max(4.0, g.h + rng.normal(0, 5)),
            rng.uniform(0.05, 1.0), image_id,
        ))
    return dets, gts


class TestMatchDetections:
    def test_hand_case(self):
        gt = [make_box(0, 0, 10, 10), make_box(30, 0, 10, 10)]
        dets = [
            make_prop(0, 0, 10, 10, 0.9),    # perfect on gt0
            make_prop(1, 0, 10, 10, 0.8),    # gt0 already claimed -> fp
            make_prop(30, 0, 10, 10, 0.95),  # perfect on gt1, highest score
        ]
        order, tp_flags, matched_gt, gt_matched = match_detections(dets, gt, 0.5)
        assert list(order) == [2, 0, 1]
        assert tp_flags.tolist() == [True, True, False]
        assert matched_gt.tolist() == [1, 0, -1]
        assert gt_matched.tolist() == [True, True]

    def test_score_tie_is_stable(self):
        gt = [make_box(0, 0, 10, 10)]
        dets = [make_prop(0, 0, 10, 10, 0.5), make_prop(1, 0, 10, 10, 0.5)]
        order, tp_flags, _, _ = match_detections(dets, gt, 0.5)
        assert list(order) == [0, 1]
        assert tp_flags.tolist() == [True, False]

    def test_matches_reference(self, rng):
        for _ in range(100):
            dets, gts = _random_instance(rng)
            et = float(rng.uniform(0.3, 0.8))
            _, tp_flags, _, _ = match_detections(dets, [g.box for g in gts], et)
            ref = match_ref(
                [tuple(d.box.as_array()) for d in dets],
                [d.score for d in dets],
                [tuple(g.box.as_array()) for g in gts],
                et,
            )
            assert tp_flags.tolist() == ref


class TestAveragePrecision:
    def test_perfect_detections(self):
        gts = [_gt(0, 0, 10, 10, object_id=0), _gt(30, 0, 10, 10, object_id=1)]
        dets = [make_prop(0, 0, 10, 10, 0.9), make_prop(30, 0, 10, 10, 0.8)]
        assert average_precision(dets, gts, 0.5) == pytest.approx(1.0)

    def test_no_detections(self):
        assert average_precision([], [_gt(0, 0, 10, 10)], 0.5) == 0.0

    def test_no_gt_returns_none(self):
        assert average_precision([make_prop(0, 0, 10, 10, 0.9)], [], 0.5) is None

    def test_single_fp_before_tp(self):
        # order by score: fp (0.9) then tp (0.8): precision at recall 1 is 1/2
        gts = [_gt(0, 0, 10, 10)]
        dets = [make_prop(50, 50, 5, 5, 0.9), make_prop(0, 0, 10, 10, 0.8)]
        # coco101: grid points 0.0..1.0 all interpolate to max precision 0.5
        assert average_precision(dets, gts, 0.5) == pytest.approx(0.5)

    def test_matches_cutoff_oracle_exactly(self):
        for seed in range(500):
            rng = np.random.default_rng(seed)
            dets, gts = _random_instance(rng, max_dets=10)
            et = float(rng.uniform(0.3, 0.8))
            got = average_precision(dets, gts, et)
            _, tp_flags, _, _ = match_detections(dets, [g.box for g in gts], et)
            if not dets:
                assert got == 0.0
                continue
            expected = ap_cutoff_ref(tp_flags.tolist(), len(gts))
            assert got == expected, f"seed {seed}: {got} != {expected}"

    def test_monotone_in_threshold(self):
        for seed in range(100):
            rng = np.random.default_rng(1000 + seed)
            dets, gts = _random_instance(rng, max_dets=10)
            aps = [average_precision(dets, gts, et) for et in DEFAULT_THRESHOLDS]
            for a, b in zip(aps, aps[1:]):
                assert b <= a + 1e-12

    def test_voc_all_exact_area(self):
        gts = [_gt(0, 0, 10, 10)]
        dets = [make_prop(50, 50, 5, 5, 0.9), make_prop(0, 0, 10, 10, 0.8)]
        # envelope precision is 0.5 over recall [0, 1]
        assert average_precision(dets, gts, 0.5, "voc_all") == pytest.approx(0.5)

    def test_multi_image_aggregation(self):
        gts = [_gt(0, 0, 10, 10, "a"), _gt(0, 0, 10, 10, "b")]
        dets = [make_prop(0, 0, 10, 10, 0.9, "a"), make_prop(0, 0, 10, 10, 0.7, "b")]
        assert average_precision(dets, gts, 0.5) == pytest.approx(1.0)


class TestThresholdStats:
    def test_counts(self):
        gts = [_gt(0, 0, 10, 10)]
        dets = [make_prop(0, 0, 10, 10, 0.9), make_prop(50, 50, 5, 5, 0.8)]
        s = threshold_stats(dets, gts, 0.5)
        assert (s.tp, s.fp, s.n_det, s.n_gt) == (1, 1, 2, 1)
        assert s.recall == 1.0 and s.precision == 0.5
        assert s.pr_curve == [(1.0, 1.0), (1.0, 0.5)]

    def test_zero_gt(self):
        s = threshold_stats([make_prop(0, 0, 10, 10, 0.9)], [], 0.5)
        assert s.ap is None and s.recall == 0.0 and s.fp == 1


class TestF1Buckets:
    def test_bucket_attribution(self):
        # two gts with mutual IoU 1/3 land in the [0.30, 0.35) bucket
        gts = [
            _gt(0, 0, 10, 10, object_id=0),
            _gt(5, 0, 10, 10, object_id=1),
            _gt(100, 100, 10, 10, object_id=2),  # isolated -> occlusion 0
        ]
        dets = [
            make_prop(0, 0, 10, 10, 0.9),     # tp on gt0
            make_prop(0.5, 0, 10, 10, 0.8),   # fp near gt0
            make_prop(100, 100, 10, 10, 0.7), # tp on isolated gt
        ]
        buckets = ((0.0, 0.05), (0.30, 0.35))
        stats, rest_tp, rest_fn = f1_by_occlusion(dets, gts, 0.5, buckets)
        low, mid = stats
        assert (low.tp, low.fp, low.fn) == (1, 0, 0)
        assert (mid.tp, mid.fp, mid.fn) == (1, 1, 1)  # gt1 unmatched -> fn
        assert low.f1 == pytest.approx(1.0)
        assert mid.f1 == pytest.approx(0.5)
        assert rest_tp == 0 and rest_fn == 0

    def test_rest_counts_out_of_bucket_gts(self):
        gts = [_gt(0, 0, 10, 10, object_id=0), _gt(100, 0, 10, 10, object_id=1)]
        dets = [make_prop(0, 0, 10, 10, 0.9)]
        stats, rest_tp, rest_fn = f1_by_occlusion(dets, gts, 0.5, ((0.4, 0.45),))
        assert all(s.f1 is None for s in stats)
        assert rest_tp == 1 and rest_fn == 1

    def test_fp_with_zero_iou_everywhere_is_dropped(self):
        gts = [_gt(0, 0, 10, 10)]
        dets = [make_prop(200, 200, 5, 5, 0.9)]
        stats, _, _ = f1_by_occlusion(dets, gts, 0.5, ((0.0, 0.05),))
        assert stats[0].fp == 0 and stats[0].fn == 1


class TestEvaluate:
    def test_report_structure(self, rng):
        dets, gts = _random_instance(rng, max_dets=8)
        report = evaluate(dets, gts)
        assert len(report.per_threshold) == len(DEFAULT_THRESHOLDS)
        assert len(report.buckets) == len(DEFAULT_BUCKETS)
        assert report.f1_et == 0.5
        aps = [s.ap for s in report.per_threshold]
        assert report.mean_ap == pytest.approx(float(np.mean(aps)))

    def test_config_validation(self):
        with pytest.raises(ValueError):
            EvalConfig(thresholds=(0.5, 1.5))
        with pytest.raises(ValueError):
            EvalConfig(buckets=((0.4, 0.5), (0.45, 0.55)))
        with pytest.raises(ValueError):
            EvalConfig(interpolation="voc07")
