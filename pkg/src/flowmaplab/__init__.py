"""flowmaplab: desk-scale laboratory for flow-map consistency training."""

from .errors import (
    ConfigParseError,
    DimensionError,
    DomainError,
    FlowMapLabError,
    InvariantViolation,
    SingularTimeError,
    TrainingDiverged,
    UnsupportedConfigError,
)
from .fieldnet import FieldNet, Tangent, grad, hvp, jvp_approx, jvp_exact
from .interpolant import BridgeCoeffs, Interpolant, make_interpolant, nu
from .mixture import GaussianMixture, PosteriorStats, batch_marginal_velocity, parse_mixture
from .objectives import LossConfig, LossOutput, compute_loss, eulerian_residual, flow_map
from .sampler import few_step_sample, post_cfg_sample, uniform_schedule
from .trainer import MetricsRecord, TrainConfig, TrainState, run_experiment, train_step

__version__ = "0.1.0"

__all__ = [
    "BridgeCoeffs", "ConfigParseError", "DimensionError", "DomainError",
    "FieldNet", "FlowMapLabError", "GaussianMixture", "Interpolant",
    "InvariantViolation", "LossConfig", "LossOutput", "MetricsRecord",
    "PosteriorStats", "SingularTimeError", "Tangent", "TrainConfig",
    "TrainState", "TrainingDiverged", "UnsupportedConfigError",
    "batch_marginal_velocity", "compute_loss", "eulerian_residual",
    "few_step_sample", "flow_map", "grad", "hvp", "jvp_approx", "jvp_exact",
    "make_interpolant", "nu", "parse_mixture", "post_cfg_sample",
    "run_experiment", "train_step", "uniform_schedule",
]
