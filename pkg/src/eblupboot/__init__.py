"""EBLUP prediction intervals for linear mixed models via the parametric bootstrap."""

from .bootstrap import (
    IntervalConfig,
    PivotSample,
    PredictionInterval,
    bootstrap_pivots,
    equal_tail_quantiles,
    predict_interval,
    predict_intervals_fh,
    shortest_length_quantiles,
)
from .estimation import (
    FitConfig,
    ParameterEstimate,
    fh_moment_A,
    fit,
    ols_beta,
    pr_moment_A,
    wls_beta,
)
from .model import (
    DiagonalVarianceComponents,
    FayHerriot,
    GeneralCallable,
    MixedTarget,
    ModelSpec,
    Parameters,
    build_sigma,
    chol_factor,
    sample_outcome,
)
from .prediction import PredictiveMoments, conditional_moments, eblup_fh
from .rng import stream

__version__ = "0.1.0"
