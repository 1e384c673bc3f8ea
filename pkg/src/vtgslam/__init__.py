"""Dense RGB-D SLAM with view-tied isotropic Gaussians organized into sections."""

from .config import MapperConfig, SlamConfig, TrackerConfig, load_config, preset
from .core import (
    CameraIntrinsics,
    ConfigurationError,
    DataError,
    DegenerateViewError,
    Frame,
    Gaussian,
    GaussianSet,
    InvalidInputError,
    InvalidStateError,
    Pose,
    Section,
)
from .evaluation import ate_rmse, depth_l1, psnr
from .pipeline import SlamSystem, write_trajectory

__version__ = "0.1.0"

__all__ = [
    "CameraIntrinsics",
    "ConfigurationError",
    "DataError",
    "DegenerateViewError",
    "Frame",
    "Gaussian",
    "GaussianSet",
    "InvalidInputError",
    "InvalidStateError",
    "MapperConfig",
    "Pose",
    "Section",
    "SlamConfig",
    "SlamSystem",
    "TrackerConfig",
    "ate_rmse",
    "depth_l1",
    "load_config",
    "preset",
    "psnr",
    "write_trajectory",
]
