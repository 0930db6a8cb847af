"""Box arithmetic, IoU, occlusion measurement and ROIAlign extraction."""

import math
from dataclasses import dataclass

import numpy as np

from . import kernels


@dataclass(frozen=True)
class Box:
    """Axis-aligned rectangle: top-left corner plus positive size, in pixels."""

    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        for name in ("x", "y", "w", "h"):
            v = getattr(self, name)
            if not math.isfinite(v):
                raise ValueError(f"box {name} not finite: {v}")
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"box size must be positive, got w={self.w}, h={self.h}")

    @property
    def x2(self) -> float:
        return self.x + self.w

    @property
    def y2(self) -> float:
        return self.y + self.h

    @property
    def area(self) -> float:
        return self.w * self.h

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.w, self.h], dtype=np.float64)


@dataclass(frozen=True)
class ScoredProposal:
    """A detection candidate: box, confidence in [0, 1], owning image."""

    box: Box
    score: float
    image_id: str

    def __post_init__(self):
        if not math.isfinite(self.score) or not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score must be finite in [0,1], got {self.score}")


@dataclass(frozen=True)
class FeatureGrid:
    """C x H x W activation grid; ``stride`` image pixels per grid cell."""

    values: np.ndarray
    stride: float = 8.0

    def __post_init__(self):
        if self.values.ndim != 3:
            raise ValueError(f"feature grid must be C x H x W, got shape {self.values.shape}")
        if not np.isfinite(self.values).all():
            raise ValueError("feature grid contains non-finite values")
        if self.stride <= 0:
            raise ValueError(f"stride must be positive, got {self.stride}")
        object.__setattr__(self, "values", np.ascontiguousarray(self.values, dtype=np.float64))

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    @property
    def height(self) -> int:
        return self.values.shape[1]

    @property
    def width(self) -> int:
        return self.values.shape[2]

    @property
    def image_width(self) -> float:
        return self.width * self.stride

    @property
    def image_height(self) -> float:
        return self.height * self.stride


@dataclass(frozen=True)
class RoiFeature:
    """Fixed-size C x S x S feature patch extracted for one box."""

    grid: np.ndarray

    def __post_init__(self):
        if self.grid.ndim != 3 or self.grid.shape[1] != self.grid.shape[2]:
            raise ValueError(f"roi feature must be C x S x S, got shape {self.grid.shape}")
        if not np.isfinite(self.grid).all():
            raise ValueError("roi feature contains non-finite values")

    @property
    def channels(self) -> int:
        return self.grid.shape[0]

    @property
    def size(self) -> int:
        return self.grid.shape[1]


def boxes_to_array(boxes) -> np.ndarray:
    """Stack boxes (or proposals) into an (N, 4) float64 xywh array."""
    out = np.zeros((len(boxes), 4), dtype=np.float64)
    for i, b in enumerate(boxes):
        if isinstance(b, ScoredProposal):
            b = b.box
        out[i, 0] = b.x
        out[i, 1] = b.y
        out[i, 2] = b.w
        out[i, 3] = b.h
    return out


def iou(a: Box, b: Box) -> float:
    """Intersection over union; symmetric, 0 for disjoint boxes."""
    ix = min(a.x2, b.x2) - max(a.x, b.x)
    iy = min(a.y2, b.y2) - max(a.y, b.y)
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    return inter / (a.area + b.area - inter)


def iou_matrix(boxes) -> np.ndarray:
    """Pairwise IoU matrix for a sequence of boxes or proposals."""
    arr = boxes if isinstance(boxes, np.ndarray) else boxes_to_array(boxes)
    if len(arr) == 0:
        return np.zeros((0, 0))
    return kernels.iou_matrix(np.ascontiguousarray(arr, dtype=np.float64))


def gt_occlusion(g: Box, others) -> float:
    """Max IoU of ``g`` with any other ground-truth box; 0 if none."""
    best = 0.0
    for o in others:
        best = max(best, iou(g, o))
    return best


def roi_align(fg: FeatureGrid, roi: Box, out_size: int = 14) -> RoiFeature:
    """Extract a C x out_size x out_size patch for ``roi`` by bilinear sampling.

    One sample per output cell, taken at the cell center mapped into feature
    coordinates (image pixels / stride, half-pixel convention). Samples
    falling outside the grid read as zero.
    """
    if roi.x >= fg.image_width or roi.x2 <= 0 or roi.y >= fg.image_height or roi.y2 <= 0:
        raise ValueError("empty ROI")
    out = kernels.roi_align_kernel(fg.values, float(fg.stride), roi.as_array(), int(out_size))
    return RoiFeature(grid=out)
