"""RGB-D semantic segmentation with attention-based modality fusion.

Pure numpy at desk scale: a tape-based autodiff core, a small op vocabulary,
a two-encoder one-decoder segmentation network, metrics, synthetic data, and
a command line front end.
"""

from .autodiff import Parameter, Tape, Tensor, grad_check
from .errors import (
    AllVoidImage,
    ConfigError,
    ContractError,
    DivergenceError,
    FormatError,
    TapeError,
)
from .estimator import MmafSegmenter
from .model import MmafNet, ModelConfig

__all__ = [
    "Tensor",
    "Parameter",
    "Tape",
    "grad_check",
    "ContractError",
    "TapeError",
    "ConfigError",
    "FormatError",
    "AllVoidImage",
    "DivergenceError",
    "MmafSegmenter",
    "MmafNet",
    "ModelConfig",
]

__version__ = "0.1.0"
