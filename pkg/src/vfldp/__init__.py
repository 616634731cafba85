"""Differentially private vertical federated learning simulator."""
from ._kernels import BACKEND
from .dp import (
    ClipSpec, DpConfig, NoiseDraw, PrivacyAccountant, add_gaussian_noise, calibrate_sigma, clip,
    gradient_estimate, overall_limit, sensitivity_bound, warmup_threshold,
)
from .errors import (
    BudgetExhausted, ConfigError, DomainError, IngestionError, ProtocolFault, ShapeError, VfldpError,
)
from .runner import ExperimentConfig, GridSpec, run, sweep

__version__ = "0.1.0"
