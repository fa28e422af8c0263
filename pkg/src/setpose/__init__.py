"""Desk-scale end-to-end multi-person pose regression toolkit.

A small numpy-backed library covering the full pipeline: a tape-autodiff
tensor core, scaled dot-product / deformable attention, Hungarian set
matching, the composite pose loss, OKS-based average-precision evaluation,
a deterministic synthetic scene generator, a toy query-based regression
model, and a training loop that overfits the synthetic scenes.

The network emits a fixed-size set of (score, K x 3 keypoint) predictions
per image directly; there is no heatmap decoding, grouping, or NMS anywhere
in the inference path.
"""

from setpose.attention import (
    AttentionConfig,
    DeformableConfig,
    deformable_attention,
    multi_head_attention,
    scaled_dot_attention,
    sinusoidal_pos_encoding,
)
from setpose.losses import (
    FocalParams,
    LossBreakdown,
    LossWeights,
    composite_loss,
    focal_loss_class,
    gaussian_heatmap_render,
    heatmap_focal_loss,
    l1_keypoint_loss,
    oks_loss,
)
from setpose.matching import Assignment, brute_force_assignment, build_cost_matrix, hungarian
from setpose.metrics import (
    ApReport,
    DtInstance,
    EvalParams,
    GtInstance,
    average_precision,
    evaluate,
    load_coco_dt,
    load_coco_gt,
    match_image,
    oks,
)
from setpose.model import (
    ModelConfig,
    PoseOutput,
    forward,
    forward_two_stage,
    init_params,
    load_checkpoint,
    save_checkpoint,
)
from setpose.synth import COCO_SKELETON, MINI_SKELETON, SceneSpec, Skeleton, export_coco, generate_scene, make_dataset
from setpose.tensor import RngState, Tape, Tensor, backward, finite_diff_grad
from setpose.train import TrainConfig, TrainTrace, overfit, predict, train_step

__all__ = [
    "ApReport", "Assignment", "AttentionConfig", "COCO_SKELETON", "DeformableConfig",
    "DtInstance", "EvalParams", "FocalParams", "GtInstance", "LossBreakdown", "LossWeights",
    "MINI_SKELETON", "ModelConfig", "PoseOutput", "RngState", "SceneSpec", "Skeleton",
    "Tape", "Tensor", "TrainConfig", "TrainTrace", "average_precision", "backward",
    "brute_force_assignment", "build_cost_matrix", "composite_loss", "deformable_attention",
    "evaluate", "export_coco", "finite_diff_grad", "focal_loss_class", "forward",
    "forward_two_stage", "gaussian_heatmap_render", "generate_scene", "heatmap_focal_loss",
    "hungarian", "init_params", "l1_keypoint_loss", "load_checkpoint", "load_coco_dt",
    "load_coco_gt", "make_dataset", "match_image", "multi_head_attention", "oks", "oks_loss",
    "overfit", "predict", "save_checkpoint", "scaled_dot_attention", "sinusoidal_pos_encoding",
    "train_step",
]

__version__ = "0.1.0"
