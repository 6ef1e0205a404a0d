"""Volumetric segmentation with a multi-receptive-field stem and graph-guided patch aggregation."""
from .losses import dice_ce, dice_loss, dsc
from .network import Model, ModelConfig, count_params, estimate_flops

__all__ = ["Model", "ModelConfig", "count_params", "dice_ce", "dice_loss", "dsc", "estimate_flops"]
__version__ = "0.1.0"
