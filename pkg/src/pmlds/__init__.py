"""Probabilistic coarse-grained models of high-dimensional time series.

A small library for learning partial-membership mixtures of low-dimensional
Ornstein-Uhlenbeck experts from streaming observations (particle filtering +
online EM), forecasting with calibrated uncertainty bands, and accelerating
fine-scale simulations by leaping over predicted spans.
"""
from .config import ModelConfig
from .em import BlockDiagnostics, EmState, em_iteration, init_statics, run_em
from .errors import (
    ConfigError,
    DataError,
    DegenerateCloudError,
    FixedPointError,
    NumericalError,
    PmldsError,
)
from .estimator import PartialMembershipLDS
from .finescale import HeatProblem, build_heat_problem, generate_synthetic, heat_step
from .integrator import IntegrationReport, IntegrationSchedule, run_adaptive
from .params import Gaussian, LatentState, OuParams, StaticParams
from .prediction import PredictiveSummary, one_step_pred_loglik, predict
from .rng import seeded_stream
from .smc import (
    FilterResult,
    ParticleCloud,
    SmoothedPaths,
    backward_smooth,
    filter_step,
    init_cloud,
    run_filter,
)
from .suffstats import SuffStats, blend, gamma_schedule

__version__ = "0.1.0"

__all__ = [
    "__version__",
    "ModelConfig",
    "PartialMembershipLDS",
    "PmldsError",
    "ConfigError",
    "DataError",
    "NumericalError",
    "DegenerateCloudError",
    "FixedPointError",
    "Gaussian",
    "OuParams",
    "LatentState",
    "StaticParams",
    "ParticleCloud",
    "FilterResult",
    "SmoothedPaths",
    "init_cloud",
    "filter_step",
    "run_filter",
    "backward_smooth",
    "SuffStats",
    "blend",
    "gamma_schedule",
    "EmState",
    "BlockDiagnostics",
    "init_statics",
    "em_iteration",
    "run_em",
    "PredictiveSummary",
    "predict",
    "one_step_pred_loglik",
    "HeatProblem",
    "build_heat_problem",
    "generate_synthetic",
    "heat_step",
    "IntegrationSchedule",
    "IntegrationReport",
    "run_adaptive",
    "seeded_stream",
]
