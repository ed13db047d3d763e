"""Neighborhood-attention speaker embedding extractors (MFA-NAT, PCF-NAT) on
a small numpy autodiff core, with scoring and evaluation tools."""
from .model import ModelConfig, SpeakerModel, count_parameters
from .na_kernel import NaConfig, TileShape, effective_ratio
from .scoring import compute_eer, compute_min_dcf
from .tensor import Tape, Tensor

__all__ = ["ModelConfig", "NaConfig", "SpeakerModel", "Tape", "Tensor", "TileShape",
           "compute_eer", "compute_min_dcf", "count_parameters", "effective_ratio"]
__version__ = "0.1.0"
