"""Brownian-bridge diffusion for pixel super-resolved virtual staining.

Low-resolution autofluorescence stacks go in, high-resolution RGB stain
images come out. The diffusion runs between the target image ``x_0`` and the
conditioner's upsampled estimate ``y`` of it.
"""
from .bridge import BridgeSchedule, build_schedule
from .errors import IncompatibleCheckpointError, InvalidConfigError, InvalidInputError, InvalidStepError
from .imaging import ImageTensor, NormalizationStats
from .sampling import ChainContext, SamplerConfig, reverse_chain, run_averaged, run_chain

__version__ = "0.1.0"

__all__ = [
    "BridgeSchedule",
    "build_schedule",
    "ImageTensor",
    "NormalizationStats",
    "ChainContext",
    "SamplerConfig",
    "reverse_chain",
    "run_chain",
    "run_averaged",
    "InvalidInputError",
    "InvalidConfigError",
    "InvalidStepError",
    "IncompatibleCheckpointError",
]
