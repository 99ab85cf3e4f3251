from .checkpoint import load, save
from .infer import forward_symmetrized, infer, infer_patchwise, pad_lenslets
from .layers import Conv2d, Conv4dInput, ConvTranspose2x, ReLU, t1_to_t2, t2_to_t1
from .model import LAYOUTS, LFMNet, NetworkSpec
from .receptive import encoder_rf, probe_receptive_field, receptive_field
from .train import Adam, TrainConfig, TrainResult, train

__all__ = [
    "Adam",
    "Conv2d",
    "Conv4dInput",
    "ConvTranspose2x",
    "LAYOUTS",
    "LFMNet",
    "NetworkSpec",
    "ReLU",
    "TrainConfig",
    "TrainResult",
    "encoder_rf",
    "forward_symmetrized",
    "infer",
    "infer_patchwise",
    "load",
    "pad_lenslets",
    "probe_receptive_field",
    "receptive_field",
    "save",
    "t1_to_t2",
    "t2_to_t1",
    "train",
]
