"""Pair taxonomy, similar/dissimilar labeling and training-pair sampling.

Two proposals are "nearby" when their IoU reaches the NMS threshold. Nearby
pairs covering zero or one object (case4/case5) are similar (y=1) and should
merge; nearby pairs covering two distinct objects (case6) are dissimilar
(y=0) and must both survive. Pairs that are not nearby (case1-3) never enter
training.
"""

import zlib
from dataclasses import dataclass

import numpy as np

from .geometry import RoiFeature, ScoredProposal, iou, roi_align
from .scene import GroundTruthObject, Scene


@dataclass(frozen=True)
class PairLabel:
    case_id: str
    nearby: bool
    object_count: int
    y: int

    def __post_init__(self):
        if self.object_count not in (0, 1, 2):
            raise ValueError(f"object_count must be 0/1/2, got {self.object_count}")
        expected_y = 0 if (self.nearby and self.object_count == 2) else 1
        if self.y != expected_y:
            raise ValueError(f"label y={self.y} inconsistent with {self.case_id}")
        expected_case = f"case{(4 if self.nearby else 1) + self.object_count}"
        if self.case_id != expected_case:
            raise ValueError(f"case_id {self.case_id} inconsistent with (nearby={self.nearby}, objects={self.object_count})")


@dataclass(frozen=True)
class PairSample:
    image_id: str
    index_i: int
    index_j: int
    roi_i: RoiFeature
    roi_j: RoiFeature
    label: PairLabel

    def __post_init__(self):
        if self.index_i == self.index_j:
            raise ValueError("pair must reference two distinct proposals")
        if not self.label.nearby:
            raise ValueError("training pairs must be nearby (cases 4-6)")


@dataclass(frozen=True)
class SamplingConfig:
    pairs_per_image: int = 32  # 64 suits denser proposal sets
    dissimilar_to_similar_ratio: tuple[int, int] = (1, 3)
    match_thr: float = 0.5
    nms_thr: float = 0.5
    roi_size: int = 14
    seed: int = 0

    def __post_init__(self):
        d, s = self.dissimilar_to_similar_ratio
        if d <= 0 or s <= 0:
            raise ValueError("ratio parts must be positive")
        if not 0 < self.match_thr <= 1 or not 0 < self.nms_thr <= 1:
            raise ValueError("thresholds must lie in (0, 1]")


def match_proposal_to_gt(
    p: ScoredProposal, gt: list[GroundTruthObject], match_thr: float
) -> int | None:
    """Identity of the best-IoU gt if that IoU reaches match_thr, else None.

    Ties go to the lowest object_id.
    """
    best_id = None
    best_iou = 0.0
    for g in sorted(gt, key=lambda g: g.object_id):
        v = iou(p.box, g.box)
        if v > best_iou:
            best_iou = v
            best_id = g.object_id
    if best_id is not None and best_iou >= match_thr:
        return best_id
    return None


def label_pair(
    p_i: ScoredProposal,
    p_j: ScoredProposal,
    gt: list[GroundTruthObject],
    nms_thr: float,
    match_thr: float,
) -> PairLabel:
    nearby = iou(p_i.box, p_j.box) >= nms_thr
    ids = {
        m
        for m in (
            match_proposal_to_gt(p_i, gt, match_thr),
            match_proposal_to_gt(p_j, gt, match_thr),
        )
        if m is not None
    }
    object_count = len(ids)
    y = 0 if (nearby and object_count == 2) else 1
    case_id = f"case{(4 if nearby else 1) + object_count}"
    return PairLabel(case_id=case_id, nearby=nearby, object_count=object_count, y=y)


def enumerate_nearby_pairs(scene: Scene, cfg: SamplingConfig) -> list[tuple[int, int, PairLabel]]:
    """All unordered nearby proposal pairs of a scene, with labels."""
    out = []
    props = scene.proposals
    for i in range(len(props)):
        for j in range(i + 1, len(props)):
            label = label_pair(props[i], props[j], scene.gt, cfg.nms_thr, cfg.match_thr)
            if label.nearby:
                out.append((i, j, label))
    return out


def sample_training_pairs(scene: Scene, cfg: SamplingConfig) -> list[PairSample]:
    """Draw up to pairs_per_image nearby pairs at the configured class ratio.

    The dissimilar:similar ratio (default 1:3) is honored up to availability;
    an exhausted class is taken whole and the budget refilled from the other.
    Deterministic for (cfg.seed, scene.image_id).
    """
    candidates = enumerate_nearby_pairs(scene, cfg)
    dissimilar = [c for c in candidates if c[2].y == 0]
    similar = [c for c in candidates if c[2].y == 1]

    rng = np.random.default_rng([cfg.seed, zlib.crc32(scene.image_id.encode())])
    d_part, s_part = cfg.dissimilar_to_similar_ratio
    budget = cfg.pairs_per_image
    want_d = budget * d_part // (d_part + s_part)
    n_d = min(want_d, len(dissimilar))
    n_s = min(budget - n_d, len(similar))
    n_d = min(budget - n_s, len(dissimilar))  # refill if similar ran short

    chosen = []
    if n_d:
        idx = rng.choice(len(dissimilar), size=n_d, replace=False)
        chosen.extend(dissimilar[k] for k in sorted(idx))
    if n_s:
        idx = rng.choice(len(similar), size=n_s, replace=False)
        chosen.extend(similar[k] for k in sorted(idx))

    samples = []
    for i, j, label in chosen:
        samples.append(
            PairSample(
                image_id=scene.image_id,
                index_i=i,
                index_j=j,
                roi_i=roi_align(scene.features, scene.proposals[i].box, cfg.roi_size),
                roi_j=roi_align(scene.features, scene.proposals[j].box, cfg.roi_size),
                label=label,
            )
        )
    return samples
