from .decoder import DecoderContext, PhysicalScalerBounds, decode, physical_scale
from .encoder import EncoderConfig, encoder_forward, init_encoder
from .hyperopt import hyperparameter_search
from .losses import LossBreakdown, loss_cc, loss_combined, loss_mse
from .training import TrainConfig, TrainResult, train

__all__ = [
    "DecoderContext", "PhysicalScalerBounds", "decode", "physical_scale",
    "EncoderConfig", "encoder_forward", "init_encoder", "hyperparameter_search",
    "LossBreakdown", "loss_cc", "loss_combined", "loss_mse",
    "TrainConfig", "TrainResult", "train",
]
