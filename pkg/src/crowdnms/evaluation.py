"""COCO-style matching, average precision, and occlusion-stratified F1.

Detections and ground truth may span multiple images; matching is per
image (greedy by descending score, one detection per object), PR/AP
aggregation is global.
"""

from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from .geometry import Box, ScoredProposal, gt_occlusion, iou
from .scene import GroundTruthObject

DEFAULT_THRESHOLDS = tuple(round(0.5 + 0.05 * k, 2) for k in range(10))
DEFAULT_BUCKETS = tuple((round(0.4 + 0.05 * k, 2), round(0.45 + 0.05 * k, 2)) for k in range(10))


@dataclass(frozen=True)
class EvalConfig:
    thresholds: tuple[float, ...] = DEFAULT_THRESHOLDS
    buckets: tuple[tuple[float, float], ...] = DEFAULT_BUCKETS
    interpolation: str = "coco101"  # or "voc_all"

    def __post_init__(self):
        if any(not 0 < t <= 1 for t in self.thresholds):
            raise ValueError("thresholds must lie in (0, 1]")
        for (lo, hi), (lo2, _) in zip(self.buckets, self.buckets[1:]):
            if hi > lo2:
                raise ValueError("buckets must be disjoint and ordered")
        if self.interpolation not in ("coco101", "voc_all"):
            raise ValueError(f"unknown interpolation {self.interpolation!r}")


@dataclass
class ThresholdStats:
    et: float
    tp: int
    fp: int
    n_det: int
    n_gt: int
    recall: float
    precision: float
    ap: float | None
    pr_curve: list[tuple[float, float]] = field(default_factory=list)  # (recall, precision)


@dataclass
class BucketStats:
    lo: float
    hi: float
    tp: int
    fp: int
    fn: int
    f1: float | None


@dataclass
class EvalReport:
    per_threshold: list[ThresholdStats]
    mean_ap: float | None
    f1_et: float
    buckets: list[BucketStats]
    rest_tp: int  # gts below the lowest bucket
    rest_fn: int


def match_detections(dets: list[ScoredProposal], gt: list[Box], et: float):
    """Greedy score-ordered matching against one image's ground truth.

    Returns (order, tp_flags, matched_gt, gt_matched):
      order: detection indices sorted by descending score (stable),
      tp_flags[k]: whether order[k] is a true positive,
      matched_gt[k]: index of the matched gt, or -1,
      gt_matched[g]: whether gt g was claimed.
    """
    order = sorted(range(len(dets)), key=lambda k: -dets[k].score)
    tp_flags = np.zeros(len(dets), dtype=bool)
    matched_gt = np.full(len(dets), -1, dtype=np.int64)
    gt_matched = np.zeros(len(gt), dtype=bool)
    for k, di in enumerate(order):
        best_g = -1
        best_iou = 0.0
        for g, gbox in enumerate(gt):
            if gt_matched[g]:
                continue
            v = iou(dets[di].box, gbox)
            if v > best_iou:
                best_iou = v
                best_g = g
        if best_g >= 0 and best_iou >= et:
            tp_flags[k] = True
            matched_gt[k] = best_g
            gt_matched[best_g] = True
    return order, tp_flags, matched_gt, gt_matched


def _group(dets, gts):
    by_image: dict[str, tuple[list, list]] = defaultdict(lambda: ([], []))
    for d in dets:
        by_image[d.image_id][0].append(d)
    for g in gts:
        by_image[g.image_id][1].append(g)
    return by_image


def _global_tp_sequence(dets, gts, et):
    """(scores, tp flags) over all images, sorted by descending score."""
    scored = []
    n_gt = 0
    for image_id, (dd, gg) in _group(dets, gts).items():
        n_gt += len(gg)
        order, tp_flags, _, _ = match_detections(dd, [g.box for g in gg], et)
        for k, di in enumerate(order):
            scored.append((dd[di].score, bool(tp_flags[k])))
    scored.sort(key=lambda t: -t[0])
    return np.array([s for s, _ in scored]), np.array([t for _, t in scored], dtype=bool), n_gt


def _interpolated_ap(tp_seq: np.ndarray, n_gt: int, interpolation: str) -> float:
    if n_gt == 0:
        raise ValueError("AP undefined for zero ground truth")
    if len(tp_seq) == 0:
        return 0.0
    tp_cum = np.cumsum(tp_seq)
    recall = tp_cum / n_gt
    precision = tp_cum / np.arange(1, len(tp_seq) + 1)
    # precision envelope: max precision at any recall >= r
    env = np.maximum.accumulate(precision[::-1])[::-1]
    if interpolation == "coco101":
        grid = np.linspace(0.0, 1.0, 101)
        idx = np.searchsorted(recall, grid, side="left")
        vals = np.where(idx < len(env), env[np.minimum(idx, len(env) - 1)], 0.0)
        return float(vals.mean())
    # voc_all: exact area under the envelope
    ap = 0.0
    prev_r = 0.0
    for r, p in zip(recall, env):
        ap += (r - prev_r) * p
        prev_r = r
    return float(ap)


def average_precision(dets, gts, et: float, interpolation: str = "coco101") -> float | None:
    """Interpolated AP at matching threshold ``et``; None when no gt exists."""
    _, tp_seq, n_gt = _global_tp_sequence(dets, gts, et)
    if n_gt == 0:
        return None
    return _interpolated_ap(tp_seq, n_gt, interpolation)


def threshold_stats(dets, gts, et: float, interpolation: str = "coco101") -> ThresholdStats:
    _, tp_seq, n_gt = _global_tp_sequence(dets, gts, et)
    tp = int(tp_seq.sum())
    n_det = len(tp_seq)
    fp = n_det - tp
    recall = tp / n_gt if n_gt else 0.0
    precision = tp / n_det if n_det else 0.0
    ap = _interpolated_ap(tp_seq, n_gt, interpolation) if n_gt else None
    curve = []
    if n_gt and n_det:
        tp_cum = np.cumsum(tp_seq)
        recalls = tp_cum / n_gt
        precisions = tp_cum / np.arange(1, n_det + 1)
        curve = list(zip(recalls.tolist(), precisions.tolist()))
    return ThresholdStats(
        et=et, tp=tp, fp=fp, n_det=n_det, n_gt=n_gt,
        recall=recall, precision=precision, ap=ap, pr_curve=curve,
    )


def f1_by_occlusion(dets, gts, et: float, buckets=DEFAULT_BUCKETS):
    """Per-bucket F1 where each gt lands in the bucket of its max IoU with
    other gts of the same image. False positives count toward the bucket of
    their best-IoU gt (skipped when best IoU is 0).

    Returns (list of BucketStats, rest_tp, rest_fn) where "rest" holds gts
    whose occlusion falls outside every bucket.
    """
    counts = {b: [0, 0, 0] for b in buckets}  # tp, fp, fn
    rest_tp = 0
    rest_fn = 0

    def bucket_of(v):
        for b in buckets:
            if b[0] <= v < b[1]:
                return b
        return None

    for image_id, (dd, gg) in _group(dets, gts).items():
        gboxes = [g.box for g in gg]
        occ = [gt_occlusion(b, gboxes[:k] + gboxes[k + 1 :]) for k, b in enumerate(gboxes)]
        order, tp_flags, matched_gt, gt_matched = match_detections(dd, gboxes, et)
        for g in range(len(gg)):
            b = bucket_of(occ[g])
            if b is None:
                if gt_matched[g]:
                    rest_tp += 1
                else:
                    rest_fn += 1
            elif gt_matched[g]:
                counts[b][0] += 1
            else:
                counts[b][2] += 1
        for k, di in enumerate(order):
            if tp_flags[k]:
                continue
            best_iou = 0.0
            best_g = -1
            for g, gbox in enumerate(gboxes):
                v = iou(dd[di].box, gbox)
                if v > best_iou:
                    best_iou = v
                    best_g = g
            if best_g >= 0:
                b = bucket_of(occ[best_g])
                if b is not None:
                    counts[b][1] += 1

    stats = []
    for (lo, hi), (tp, fp, fn) in ((b, counts[b]) for b in buckets):
        if tp + fp + fn == 0:
            f1 = None
        else:
            p = tp / (tp + fp) if tp + fp else 0.0
            r = tp / (tp + fn) if tp + fn else 0.0
            f1 = 2 * p * r / (p + r) if p + r > 0 else 0.0
        stats.append(BucketStats(lo=lo, hi=hi, tp=tp, fp=fp, fn=fn, f1=f1))
    return stats, rest_tp, rest_fn


def evaluate(dets, gts, cfg: EvalConfig = EvalConfig(), f1_et: float = 0.5) -> EvalReport:
    """Full report: per-threshold PR/AP sweep plus occlusion-bucket F1."""
    per = [threshold_stats(dets, gts, et, cfg.interpolation) for et in cfg.thresholds]
    aps = [s.ap for s in per if s.ap is not None]
    buckets, rest_tp, rest_fn = f1_by_occlusion(dets, gts, f1_et, cfg.buckets)
    return EvalReport(
        per_threshold=per,
        mean_ap=float(np.mean(aps)) if aps else None,
        f1_et=f1_et,
        buckets=buckets,
        rest_tp=rest_tp,
        rest_fn=rest_fn,
    )
