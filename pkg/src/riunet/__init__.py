"""Range-image U-Net segmentation of LiDAR point clouds."""

from .projection import (
    ChannelStats,
    PointCloud,
    ProjectionConfig,
    RangeImage,
    backproject_labels,
    cartesian_to_spherical,
    normalize_channels,
    project,
)
from .model import ModelConfig, UNetModel, build, load_weights, parameter_count, save_weights
from .loss import boundary_weight_map, masked_weighted_cross_entropy, softmax_probs
from .metrics import SegMetrics, accumulate_confusion, iou_per_class
from .tensor import Tensor, backward, no_grad, set_deterministic
from .optim import Parameter, adam_step

__version__ = "0.1.0"
