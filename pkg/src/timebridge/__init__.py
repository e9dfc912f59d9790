"""Diffusion-bridge time-series generation with data-informed priors."""

from .schedule import NoiseSchedule
from .priors import DataStats, GPPrior, Prior, SplineEndpoint
from .denoiser import Denoiser, DenoiserConfig
from .training import TrainConfig
from .sampler import SamplerConfig

__version__ = "0.1.0"

__all__ = [
    "NoiseSchedule",
    "DataStats",
    "GPPrior",
    "Prior",
    "SplineEndpoint",
    "Denoiser",
    "DenoiserConfig",
    "TrainConfig",
    "SamplerConfig",
]
