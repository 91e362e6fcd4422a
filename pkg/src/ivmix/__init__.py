"""Sliding-window GNSS factor-graph estimation with online-learned Gaussian mixture error models."""

from .core import ClockState, ErrorSample, OdometryMeasurement, PoseState, PseudorangeMeasurement, StateWindow
from .evaluation import AteReport, ate, compare
from .mixture import (
    ComplexityConfig,
    GaussianMixture,
    MixturePriors,
    VariationalPosterior,
    complexity_learning,
    em_fit,
    vbi_fit,
)
from .pipeline import EpochResult, Pipeline, PipelineConfig, run
from .robust import sum_mixture_residual
from .sim import ScenarioSpec, generate
from .solver import Problem, SolveReport, SolverOptions, solve

__version__ = "0.1.0"
