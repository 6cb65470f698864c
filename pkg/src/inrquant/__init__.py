"""Post-training mixed-precision quantization and coding of a small video INR."""

from .allocator import BitConfig, InfeasibleTarget, RateTarget, allocate, enumerate_configs, model_size_bits
from .calibrate import CalibOptions, calibrate, calibrate_layerwise_baseline
from .codec import Bitstream, RDPoint, bpp, decode, encode
from .estimators import NeRVLite, RateQuantizer
from .nervlite import Checkpoint, ModelSpec, TrainOptions, build_model, load_checkpoint, render_all, save_checkpoint, train
from .quant import QuantState, QuantizedModel, finalize, minmax_state
from .sensitivity import hvp, omega
from .video import VideoClip, load_clip, save_clip, synthetic_clip

__version__ = "0.1.0"

__all__ = [
    "allocate",
    "BitConfig",
    "Bitstream",
    "bpp",
    "build_model",
    "CalibOptions",
    "calibrate",
    "calibrate_layerwise_baseline",
    "Checkpoint",
    "decode",
    "encode",
    "enumerate_configs",
    "finalize",
    "hvp",
    "InfeasibleTarget",
    "load_checkpoint",
    "load_clip",
    "minmax_state",
    "model_size_bits",
    "ModelSpec",
    "NeRVLite",
    "omega",
    "QuantizedModel",
    "QuantState",
    "RateQuantizer",
    "RateTarget",
    "RDPoint",
    "render_all",
    "save_checkpoint",
    "save_clip",
    "synthetic_clip",
    "train",
    "TrainOptions",
    "VideoClip",
]
