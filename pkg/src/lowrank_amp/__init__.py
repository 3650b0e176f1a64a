"""Low-rank matrix estimation by approximate message passing.

AMP solvers, state evolution, community-detection phase transitions and a
spectral baseline for matrices observed through element-wise channels.
"""
from .channels import ExponentialChannel, GaussianChannel, SBMChannel, make_channel
from .errors import DivergenceError, DomainError, GridRangeError, NumericalError, ParameterError
from .instances import (
    PlantedInstance, aligned_mse, community_overlap, generate_uv, generate_xkx,
    load_instance, mse, save_instance,
)
from .priors import CommunityPrior, GaussianPrior, RademacherPrior, make_prior

__version__ = "0.1.0"
