"""Composite specifications for structural equation models."""

from .builders import (
    CompositeBlock,
    Regression,
    StructuralSpec,
    build,
    build_ho_blended,
    build_ho_original,
    build_ho_phantom,
    build_ho_refined,
    build_one_step_modified,
    build_pseudo_indicator,
    build_two_step,
    saturation_plan,
)
from .estimator import EstimationSettings, FitResult, SampleMoments, delta_method, estimate
from .ram import RamModel, implied_covariance

__version__ = "0.1.0"
