"""The four suppression algorithms: greedy, linear/Gaussian soft, pairwise.

All functions are pure per-image operations on lists of ScoredProposal and
return kept proposals in selection order. Ties in the running argmax are
broken by input order (earlier wins). The pairwise variant relaxes greedy
suppression: a neighbor is removed only when it both overlaps the selected
box (IoU >= N_t) and sits close in the learned embedding (distance <= D_t).
"""

import json
from dataclasses import dataclass
from importlib import resources

import numpy as np

from . import kernels
from .embed import DistanceMatrix
from .geometry import ScoredProposal, boxes_to_array


def load_presets() -> dict[float, tuple[float, float]]:
    """Documented per-E_t defaults: E_t -> (N_t, D_t). Freely overridable."""
    raw = json.loads(resources.files("crowdnms.data").joinpath("presets.json").read_text())
    return {float(k): (v["nt"], v["dt"]) for k, v in raw["presets"].items()}


@dataclass(frozen=True)
class SuppressionConfig:
    method: str  # greedy | soft_linear | soft_gaussian | pairwise
    nt: float | None = None
    dt: float | None = None
    sigma: float | None = None
    theta: float | None = None

    def __post_init__(self):
        needed = {
            "greedy": ("nt",),
            "soft_linear": ("nt", "theta"),
            "soft_gaussian": ("sigma", "theta"),
            "pairwise": ("nt", "dt"),
        }
        if self.method not in needed:
            raise ValueError(f"unknown method {self.method!r}")
        for f in needed[self.method]:
            if getattr(self, f) is None:
                raise ValueError(f"method {self.method!r} requires {f}")


def _scores(props) -> np.ndarray:
    return np.array([p.score for p in props], dtype=np.float64)


def greedy_nms(props: list[ScoredProposal], nt: float) -> list[ScoredProposal]:
    if not props:
        return []
    keep = kernels.greedy_nms_kernel(boxes_to_array(props), _scores(props), float(nt))
    return [props[i] for i in keep]


def soft_nms_linear(
    props: list[ScoredProposal], nt: float, theta: float
) -> list[ScoredProposal]:
    """Iterative max-selection; neighbors with IoU >= nt are rescored by
    s *= (1 - iou); proposals dropping below theta are discarded."""
    if not props:
        return []
    keep, scores = kernels.soft_nms_linear_kernel(
        boxes_to_array(props), _scores(props), float(nt), float(theta)
    )
    return [
        ScoredProposal(box=props[i].box, score=float(s), image_id=props[i].image_id)
        for i, s in zip(keep, scores)
    ]


def soft_nms_gaussian(
    props: list[ScoredProposal], sigma: float, theta: float
) -> list[ScoredProposal]:
    """As the linear variant but every remaining proposal decays by
    exp(-iou^2 / sigma); no hard IoU gate."""
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    if not props:
        return []
    keep, scores = kernels.soft_nms_gaussian_kernel(
        boxes_to_array(props), _scores(props), float(sigma), float(theta)
    )
    return [
        ScoredProposal(box=props[i].box, score=float(s), image_id=props[i].image_id)
        for i, s in zip(keep, scores)
    ]


def pairwise_nms(
    props: list[ScoredProposal], nt: float, dt: float, dm: DistanceMatrix
) -> list[ScoredProposal]:
    """Greedy selection that suppresses a neighbor only when it is both
    overlapping (IoU >= nt) and embedding-close (distance <= dt).

    ``dm`` must cover every pair with IoU >= nt; a missing entry raises.
    """
    if not props:
        return []
    dense = dm.dense(len(props))
    keep, bad_i, bad_j = kernels.pairwise_nms_kernel(
        boxes_to_array(props), _scores(props), float(nt), float(dt), dense
    )
    if bad_i >= 0:
        raise ValueError(f"incomplete distance matrix: no entry for pair ({bad_i}, {bad_j})")
    return [props[i] for i in keep]


def run(props: list[ScoredProposal], cfg: SuppressionConfig, dm: DistanceMatrix | None = None):
    if cfg.method == "greedy":
        return greedy_nms(props, cfg.nt)
    if cfg.method == "soft_linear":
        return soft_nms_linear(props, cfg.nt, cfg.theta)
    if cfg.method == "soft_gaussian":
        return soft_nms_gaussian(props, cfg.sigma, cfg.theta)
    if dm is None:
        raise ValueError("pairwise method requires a distance matrix")
    return pairwise_nms(props, cfg.nt, cfg.dt, dm)
