"""CNN encoder-decoder image steganography with a hand-written numpy backend."""

from .steg_model import ModelParams, NetworkConfig, build_model, decoder_forward, encoder_forward
from .training import Checkpoint, LossWeights, train

__all__ = [
    "Checkpoint",
    "LossWeights",
    "ModelParams",
    "NetworkConfig",
    "build_model",
    "decoder_forward",
    "encoder_forward",
    "train",
]

__version__ = "0.1.0"
