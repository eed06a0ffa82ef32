"""ColonFormer: transformer encoder, UPer decoder and residual axial reverse attention for polyp segmentation."""

from .losses import LossConfig, boundary_weights, deep_supervised_loss, total_loss, weighted_focal, weighted_iou
from .model import ColonFormer, build_model, count_parameters, load_checkpoint, save_checkpoint

__all__ = [
    "ColonFormer", "LossConfig", "boundary_weights", "build_model", "count_parameters",
    "deep_supervised_loss", "load_checkpoint", "save_checkpoint", "total_loss", "weighted_focal", "weighted_iou",
]
