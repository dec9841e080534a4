"""Bidirectional infrared/visible image translation with a single conditional
diffusion model and statistically guided sampling."""

__version__ = "0.1.0"

from .conditioning import IR_TO_VIS, VIS_TO_IR, Direction, Modality
from .constraints import ConstraintSpec, constraint_loss, fit_constraints
from .denoiser import Denoiser, DenoiserConfig, build_denoiser
from .errors import CMDiffError, ConfigError, IngestionError, NumericError
from .schedule import DiffusionSchedule, build_linear_schedule, scaled_linear_schedule

__all__ = [
    "__version__",
    "IR_TO_VIS",
    "VIS_TO_IR",
    "Direction",
    "Modality",
    "ConstraintSpec",
    "constraint_loss",
    "fit_constraints",
    "Denoiser",
    "DenoiserConfig",
    "build_denoiser",
    "CMDiffError",
    "ConfigError",
    "IngestionError",
    "NumericError",
    "DiffusionSchedule",
    "build_linear_schedule",
    "scaled_linear_schedule",
]
