"""Deterministic synthetic crowded scenes.

Each scene carries ground-truth boxes with identity tags, noisy scored
proposals jittered around them, and a feature grid where every object
paints its own channel signature. The signatures make the pair-relationship
task learnable: a region's average feature identifies which object it
covers.
"""

from dataclasses import dataclass, field

import numpy as np

from .geometry import Box, FeatureGrid, ScoredProposal, iou

PLACEMENT_RETRIES = 1000
JITTER_RETRIES = 50
MIN_PROPOSAL_IOU = 0.3


class PlacementError(RuntimeError):
    pass


@dataclass(frozen=True)
class GroundTruthObject:
    image_id: str
    object_id: int
    box: Box


@dataclass(frozen=True)
class SceneConfig:
    n_scenes: int = 200
    objects_per_scene: tuple[int, int] = (2, 4)
    occlusion_target: tuple[float, float] = (0.5, 0.8)
    proposals_per_object: int = 4
    center_jitter: float = 0.01  # fraction of object size
    size_jitter: float = 0.015  # stddev of log-size jitter
    score_noise: float = 0.08
    signature_strength: float = 6.0
    feature_noise: float = 0.1
    channels: int = 8
    width: int = 256
    height: int = 192
    stride: float = 8.0
    min_size: float = 36.0
    max_size: float = 64.0
    seed: int = 0

    def __post_init__(self):
        if self.objects_per_scene[0] < 0 or self.objects_per_scene[0] > self.objects_per_scene[1]:
            raise ValueError(f"bad objects_per_scene range {self.objects_per_scene}")
        lo, hi = self.occlusion_target
        if not (0.0 <= lo <= hi < 1.0):
            raise ValueError(f"bad occlusion_target range {self.occlusion_target}")


@dataclass(frozen=True)
class Scene:
    image_id: str
    width: int
    height: int
    gt: list[GroundTruthObject]
    proposals: list[ScoredProposal]
    features: FeatureGrid

    @property
    def gt_boxes(self) -> list[Box]:
        return [g.box for g in self.gt]


def scene_image_id(index: int) -> str:
    return f"scene_{index:06d}"


def _place_objects(cfg: SceneConfig, rng: np.random.Generator, count: int) -> list[Box]:
    """Place ``count`` boxes; the first two form a pair with IoU inside the
    occlusion target, the rest stay below the target's lower edge."""
    lo, hi = cfg.occlusion_target
    boxes: list[Box] = []
    for k in range(count):
        for attempt in range(PLACEMENT_RETRIES):
            if k == 1 and lo > 0.0:
                # Horizontal offset of an equal-size box: iou(dx) = (w-dx)/(w+dx)
                t = rng.uniform(lo, hi)
                base = boxes[0]
                dx = base.w * (1.0 - t) / (1.0 + t)
                dx *= -1.0 if rng.random() < 0.5 else 1.0
                cand = Box(base.x + dx, base.y, base.w, base.h)
                if not (0 <= cand.x and cand.x2 <= cfg.width):
                    continue
                pair_iou = iou(boxes[0], cand)
                if not (lo <= pair_iou <= hi):
                    continue
            else:
                w = rng.uniform(cfg.min_size, cfg.max_size)
                h = rng.uniform(cfg.min_size, cfg.max_size)
                x = rng.uniform(0, cfg.width - w)
                y = rng.uniform(0, cfg.height - h)
                cand = Box(x, y, w, h)
                if boxes and max(iou(cand, b) for b in boxes) >= max(lo, 1e-9):
                    continue
            boxes.append(cand)
            break
        else:
            raise PlacementError("placement failed")
    return boxes


def _jitter_proposal(cfg: SceneConfig, rng: np.random.Generator, g: Box) -> Box:
    for _ in range(JITTER_RETRIES):
        cx = g.x + g.w / 2 + rng.normal(0, cfg.center_jitter * g.w)
        cy = g.y + g.h / 2 + rng.normal(0, cfg.center_jitter * g.h)
        w = g.w * np.exp(rng.normal(0, cfg.size_jitter))
        h = g.h * np.exp(rng.normal(0, cfg.size_jitter))
        cand = Box(cx - w / 2, cy - h / 2, w, h)
        if iou(cand, g) >= MIN_PROPOSAL_IOU:
            return cand
    return Box(g.x, g.y, g.w, g.h)


def _paint_features(cfg: SceneConfig, rng: np.random.Generator, boxes: list[Box]) -> FeatureGrid:
    gh = int(np.ceil(cfg.height / cfg.stride))
    gw = int(np.ceil(cfg.width / cfg.stride))
    values = np.zeros((cfg.channels, gh, gw))
    sigs = []
    for _ in boxes:
        sig = rng.normal(size=cfg.channels)
        sig *= cfg.signature_strength / np.linalg.norm(sig)
        sigs.append(sig)
    xs = (np.arange(gw) + 0.5) * cfg.stride
    ys = (np.arange(gh) + 0.5) * cfg.stride
    gx, gy = np.meshgrid(xs, ys)
    # where boxes overlap, a cell belongs to the object whose center is
    # nearest; without this rule heavily occluded pairs become inseparable
    dist2 = np.full((len(boxes), gh, gw), np.inf)
    for k, b in enumerate(boxes):
        inside = (gx >= b.x) & (gx < b.x2) & (gy >= b.y) & (gy < b.y2)
        cx, cy = b.x + b.w / 2, b.y + b.h / 2
        dist2[k][inside] = ((gx - cx) ** 2 + (gy - cy) ** 2)[inside]
    if boxes:
        owner = np.argmin(dist2, axis=0)
        covered = np.isfinite(dist2).any(axis=0)
        for k, sig in enumerate(sigs):
            values[:, covered & (owner == k)] += sig[:, None]
    # low-frequency noise: coarse field blown up to grid size
    coarse = rng.normal(0, cfg.feature_noise, size=(cfg.channels, max(1, gh // 4), max(1, gw // 4)))
    up = np.repeat(np.repeat(coarse, 4, axis=1), 4, axis=2)
    values += up[:, :gh, :gw]
    return FeatureGrid(values=values, stride=cfg.stride)


def object_signature(scene: Scene, g: GroundTruthObject) -> np.ndarray:
    """Average feature over a gt box's grid extent (signature estimate)."""
    fg = scene.features
    x0 = max(0, int(np.floor(g.box.x / fg.stride)))
    x1 = max(x0 + 1, int(np.ceil(g.box.x2 / fg.stride)))
    y0 = max(0, int(np.floor(g.box.y / fg.stride)))
    y1 = max(y0 + 1, int(np.ceil(g.box.y2 / fg.stride)))
    return fg.values[:, y0:y1, x0:x1].mean(axis=(1, 2))


def generate_scene(cfg: SceneConfig, index: int) -> Scene:
    """Build scene ``index``; deterministic for a given (cfg.seed, index)."""
    rng = np.random.default_rng([cfg.seed, index])
    image_id = scene_image_id(index)
    lo_n, hi_n = cfg.objects_per_scene
    count = int(rng.integers(lo_n, hi_n + 1))
    boxes = _place_objects(cfg, rng, count)

    gt = [GroundTruthObject(image_id=image_id, object_id=i, box=b) for i, b in enumerate(boxes)]

    proposals: list[ScoredProposal] = []
    for g in boxes:
        for _ in range(cfg.proposals_per_object):
            pb = _jitter_proposal(cfg, rng, g)
            base = 0.2 + 0.75 * iou(pb, g)
            score = float(np.clip(base - rng.normal(0, cfg.score_noise), 0.0, 1.0))
            proposals.append(ScoredProposal(box=pb, score=score, image_id=image_id))

    features = _paint_features(cfg, rng, boxes)
    return Scene(
        image_id=image_id,
        width=cfg.width,
        height=cfg.height,
        gt=gt,
        proposals=proposals,
        features=features,
    )


def generate_corpus(cfg: SceneConfig) -> list[Scene]:
    return [generate_scene(cfg, i) for i in range(cfg.n_scenes)]


def oracle_distance(
    p_i: ScoredProposal, p_j: ScoredProposal, scene: Scene, match_thr: float = 0.5
) -> float:
    """Perfect stand-in for the learned pairwise distance.

    1.0 when the two proposals cover two distinct objects (a dissimilar
    pair), 0.0 otherwise.
    """
    from .pairs import match_proposal_to_gt

    if p_i.image_id != scene.image_id or p_j.image_id != scene.image_id:
        raise ValueError("proposal does not belong to this scene")
    a = match_proposal_to_gt(p_i, scene.gt, match_thr)
    b = match_proposal_to_gt(p_j, scene.gt, match_thr)
    if a is not None and b is not None and a != b:
        return 1.0
    return 0.0
