"""Implant depth prediction on CBCT-like volumes.

Two-stage pipeline: a 2D region detector finds the implant site on an axial
slice, a sub-volume is cropped around it, and a 3D/2D encoder-decoder
regresses the start/end slice interval the implant should occupy.
"""

from .config import (ModelConfig, RunConfig, TrainConfig, idpnet_defaults,
                     ird_defaults, load_config, lr_at, save_config)
from .errors import (
    CheckpointError,
    ConfigError,
    ImplantDepthError,
    ShapeError,
    TrainingDiverged,
    VolumeFormatError,
)
from .geometry import Interval, interval_iou
from .losses import LossReport, TextureStack
from .metrics import (EvalResult, acc_r1, evaluate, safety_check,
                      texture_variation_curve)
from .phantom import (
    CONDITIONS,
    ImplantAnnotation,
    PatientRecord,
    PhantomConfig,
    Volume,
    dataset_split,
    generate_dataset,
    generate_phantom,
)
from .volume_io import read_volume, write_volume

__version__ = "0.1.0"

__all__ = [
    "CheckpointError",
    "ConfigError",
    "ImplantDepthError",
    "ShapeError",
    "TrainingDiverged",
    "VolumeFormatError",
    "Interval",
    "interval_iou",
    "LossReport",
    "TextureStack",
    "EvalResult",
    "acc_r1",
    "evaluate",
    "safety_check",
    "texture_variation_curve",
    "CONDITIONS",
    "ImplantAnnotation",
    "PatientRecord",
    "PhantomConfig",
    "Volume",
    "dataset_split",
    "generate_dataset",
    "generate_phantom",
    "read_volume",
    "write_volume",
    "ModelConfig",
    "RunConfig",
    "TrainConfig",
    "idpnet_defaults",
    "ird_defaults",
    "load_config",
    "lr_at",
    "save_config",
    "__version__",
]
