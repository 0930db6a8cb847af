"""crowdnms: detection post-processing for crowded scenes.

GreedyNMS, linear/Gaussian Soft-NMS and Pairwise-NMS, a trainable
pairwise-relationship embedding, and a COCO-style evaluation harness,
exercised end-to-end on synthetic occluded scenes.
"""

from .geometry import Box, FeatureGrid, RoiFeature, ScoredProposal, gt_occlusion, iou, roi_align
from .scene import Scene, SceneConfig, generate_scene, oracle_distance
from .suppress import greedy_nms, pairwise_nms, soft_nms_gaussian, soft_nms_linear

__all__ = [
    "Box", "FeatureGrid", "RoiFeature", "ScoredProposal",
    "iou", "gt_occlusion", "roi_align",
    "Scene", "SceneConfig", "generate_scene", "oracle_distance",
    "greedy_nms", "soft_nms_linear", "soft_nms_gaussian", "pairwise_nms",
]

__version__ = "0.1.0"
