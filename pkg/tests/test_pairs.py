import numpy as np
import pytest

from crowdnms.geometry import iou
from crowdnms.pairs import (
    PairLabel,
    PairSample,
    SamplingConfig,
    enumerate_nearby_pairs,
    label_pair,
    match_proposal_to_gt,
    sample_training_pairs,
)
from crowdnms.scene import GroundTruthObject, SceneConfig, generate_scene

from .conftest import make_box, make_prop


def _gt(object_id, x, y, w, h, image_id="img"):
    return GroundTruthObject(image_id=image_id, object_id=object_id, box=make_box(x, y, w, h))


TWO_GT = [_gt(0, 0, 0, 40, 40), _gt(1, 100, 0, 40, 40)]


class TestMatchProposalToGt:
    def test_best_overlap_wins(self):
        p = make_prop(2, 0, 40, 40, 0.9)
        assert match_proposal_to_gt(p, TWO_GT, 0.5) == 0

    def test_below_threshold_is_none(self):
        p = make_prop(30, 30, 40, 40, 0.9)  # iou with gt0 = 100/3100
        assert match_proposal_to_gt(p, TWO_GT, 0.5) is None

    def test_tie_goes_to_lowest_id(self):
        # identical twin gts: strict '>' keeps the first (lowest object_id)
        twins = [_gt(1, 0, 0, 40, 40), _gt(0, 0, 0, 40, 40)]
        p = make_prop(0, 0, 40, 40, 0.9)
        assert match_proposal_to_gt(p, twins, 0.5) == 0

    def test_empty_gt(self):
        assert match_proposal_to_gt(make_prop(0, 0, 10, 10, 0.5), [], 0.5) is None


class TestLabelPair:
    def test_case4_nearby_zero_objects(self):
        a = make_prop(200, 100, 30, 30, 0.4)
        b = make_prop(205, 100, 30, 30, 0.4)
        lab = label_pair(a, b, TWO_GT, 0.5, 0.5)
        assert (lab.case_id, lab.nearby, lab.object_count, lab.y) == ("case4", True, 0, 1)

    def test_case5_nearby_one_object(self):
        a = make_prop(0, 0, 40, 40, 0.9)
        b = make_prop(3, 0, 40, 40, 0.8)
        lab = label_pair(a, b, TWO_GT, 0.5, 0.5)
        assert (lab.case_id, lab.object_count, lab.y) == ("case5", 1, 1)

    def test_case6_nearby_two_objects(self):
        gt = [_gt(0, 0, 0, 40, 40), _gt(1, 20, 0, 40, 40)]
        a = make_prop(0, 0, 40, 40, 0.9)
        b = make_prop(20, 0, 40, 40, 0.9)
        assert iou(a.box, b.box) >= 0.33
        lab = label_pair(a, b, gt, 0.33, 0.5)
        assert (lab.case_id, lab.object_count, lab.y) == ("case6", 2, 0)

    def test_cases_1_to_3_not_nearby(self):
        far_a = make_prop(0, 0, 40, 40, 0.9)
        far_b = make_prop(100, 0, 40, 40, 0.9)
        lab = label_pair(far_a, far_b, TWO_GT, 0.5, 0.5)
        assert lab.case_id == "case3" and not lab.nearby and lab.y == 1

    def test_nearby_boundary_inclusive(self):
        a = make_prop(0, 0, 10, 10, 0.5)
        b = make_prop(0, 5, 10, 10, 0.5)  # iou exactly 1/3
        assert label_pair(a, b, [], 1 / 3, 0.5).nearby
        assert not label_pair(a, b, [], 1 / 3 + 1e-9, 0.5).nearby


class TestPairLabelValidation:
    def test_consistent_labels_pass(self):
        PairLabel(case_id="case6", nearby=True, object_count=2, y=0)
        PairLabel(case_id="case2", nearby=False, object_count=1, y=1)

    @pytest.mark.parametrize("kw", [
        dict(case_id="case6", nearby=True, object_count=2, y=1),
        dict(case_id="case5", nearby=True, object_count=1, y=0),
        dict(case_id="case4", nearby=True, object_count=2, y=0),
        dict(case_id="case5", nearby=True, object_count=3, y=1),
    ])
    def test_inconsistent_labels_rejected(self, kw):
        with pytest.raises(ValueError):
            PairLabel(**kw)


class TestPairSampleValidation:
    def test_rejects_self_pair_and_far_pair(self):
        from crowdnms.geometry import RoiFeature

        roi = RoiFeature(grid=np.zeros((1, 2, 2)))
        near = PairLabel(case_id="case4", nearby=True, object_count=0, y=1)
        far = PairLabel(case_id="case1", nearby=False, object_count=0, y=1)
        with pytest.raises(ValueError):
            PairSample("img", 3, 3, roi, roi, near)
        with pytest.raises(ValueError):
            PairSample("img", 0, 1, roi, roi, far)


class TestSamplingConfigValidation:
    def test_bad_values(self):
        with pytest.raises(ValueError):
            SamplingConfig(dissimilar_to_similar_ratio=(0, 3))
        with pytest.raises(ValueError):
            SamplingConfig(match_thr=0.0)
        with pytest.raises(ValueError):
            SamplingConfig(nms_thr=1.5)


class TestSampling:
    CFG = SamplingConfig()

    def _scene(self, index=0):
        return generate_scene(SceneConfig(n_scenes=1, proposals_per_object=8), index)

    def test_enumeration_matches_naive(self):
        scene = self._scene()
        got = enumerate_nearby_pairs(scene, self.CFG)
        expected = []
        n = len(scene.proposals)
        for i in range(n):
            for j in range(i + 1, n):
                if iou(scene.proposals[i].box, scene.proposals[j].box) >= self.CFG.nms_thr:
                    expected.append((i, j))
        assert [(i, j) for i, j, _ in got] == expected

    def test_ratio_honored_when_available(self):
        # With a 1:3 ratio and a 32-pair budget the target split is 8 + 24.
        for index in range(6):
            scene = self._scene(index)
            cands = enumerate_nearby_pairs(scene, self.CFG)
            n_d_avail = sum(1 for c in cands if c[2].y == 0)
            n_s_avail = sum(1 for c in cands if c[2].y == 1)
            samples = sample_training_pairs(scene, self.CFG)
            n_d = sum(1 for s in samples if s.label.y == 0)
            n_s = sum(1 for s in samples if s.label.y == 1)
            assert len(samples) <= self.CFG.pairs_per_image
            assert n_d == min(max(8, 32 - min(24, n_s_avail)), n_d_avail)
            assert n_s == min(32 - min(8, n_d_avail), n_s_avail)

    def test_refill_from_similar_when_dissimilar_short(self):
        # a scene with one isolated object has no case6 pairs at all
        cfg = SceneConfig(n_scenes=1, objects_per_scene=(1, 1), proposals_per_object=12)
        scene = generate_scene(cfg, 0)
        samples = sample_training_pairs(scene, self.CFG)
        assert all(s.label.y == 1 for s in samples)
        assert len(samples) > 8  # similar class refills the dissimilar budget

    def test_deterministic(self):
        scene = self._scene()
        a = sample_training_pairs(scene, self.CFG)
        b = sample_training_pairs(scene, self.CFG)
        assert [(s.index_i, s.index_j, s.label.case_id) for s in a] == [
            (s.index_i, s.index_j, s.label.case_id) for s in b
        ]
        for sa, sb in zip(a, b):
            np.testing.assert_array_equal(sa.roi_i.grid, sb.roi_i.grid)

    def test_seed_changes_selection(self):
        scene = self._scene()
        a = sample_training_pairs(scene, self.CFG)
        b = sample_training_pairs(scene, SamplingConfig(seed=7))
        keys = lambda ss: [(s.index_i, s.index_j) for s in ss]
        assert keys(a) != keys(b) or len(a) == len(
            enumerate_nearby_pairs(scene, self.CFG)
        )

    def test_roi_shape(self):
        scene = self._scene()
        samples = sample_training_pairs(scene, SamplingConfig(roi_size=7))
        assert samples, "sampler returned nothing for a crowded scene"
        for s in samples:
            assert s.roi_i.grid.shape == (scene.features.channels, 7, 7)
            assert s.roi_j.grid.shape == (scene.features.channels, 7, 7)
