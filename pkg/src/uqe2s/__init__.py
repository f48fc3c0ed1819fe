"""Unconditional quantile effects of a covariate observed only in an auxiliary sample."""

from __future__ import annotations

__version__ = "0.1.0"

from .bounds import BoundsResult, estimate_bounds  # noqa: E402
from .counterfactual import CounterfactualDistribution, ShiftKind, build_counterfactual  # noqa: E402
from .errors import NumericalError, UqeError, ValidationError  # noqa: E402
from .sample import AuxSample, MergedSample, StudySample, merge_samples, read_aux_csv, read_study_csv  # noqa: E402
from .uqe import EstimatorConfig, UqeResult, estimate_uqe, fit_theta, run_pipeline  # noqa: E402

__all__ = [
    "__version__",
    "AuxSample",
    "BoundsResult",
    "CounterfactualDistribution",
    "EstimatorConfig",
    "MergedSample",
    "NumericalError",
    "ShiftKind",
    "StudySample",
    "UqeError",
    "UqeResult",
    "ValidationError",
    "build_counterfactual",
    "estimate_bounds",
    "estimate_uqe",
    "fit_theta",
    "merge_samples",
    "read_aux_csv",
    "read_study_csv",
    "run_pipeline",
]
