"""Adaptive multi-hierarchical attention for feature pyramids, in numpy."""

from .aa import AABlockParams, FusionMode, aa_forward, cascade_fuse, head_attention
from .me import MEBlockParams, me_forward
from .metrics import Box, DetectionRecord, EvalReport, ap_range, average_precision, iou
from .pyramid import AmamConfig, FeaturePyramid, amam_forward, init_amam, toy_backbone, toy_head
from .tensor import Tensor, gradcheck
from .train import LrSchedule, lr_at, sgd_step, toy_train

__version__ = "0.1.0"
