"""Switching regressions with latent regimes and invariance-based causal discovery."""

from .core import (
    Dataset,
    EqualVariances,
    LowerBound,
    ParamLayout,
    SRTheta,
    TransitionParam,
    loglik,
    posterior_state_probs,
)
from .discovery import DiscoveryOptions, DiscoveryResult, discover, lasso_screen
from .errors import ICPHError
from .estimation import FitOptions, FitResult, fit, observed_fisher
from .experiments import ExperimentConfig, run_experiment
from .invariance import (
    ConfidenceRegion,
    min_max_mahalanobis,
    region_from_fit,
    test_equality_multi_degree,
    test_equality_sr,
)
from .simulate import ScmSpec, gmep, reconstruct_states, simulate

__version__ = "0.1.0"

__all__ = [
    "ConfidenceRegion",
    "Dataset",
    "DiscoveryOptions",
    "DiscoveryResult",
    "EqualVariances",
    "ExperimentConfig",
    "FitOptions",
    "FitResult",
    "ICPHError",
    "LowerBound",
    "ParamLayout",
    "SRTheta",
    "ScmSpec",
    "TransitionParam",
    "discover",
    "fit",
    "gmep",
    "lasso_screen",
    "loglik",
    "min_max_mahalanobis",
    "observed_fisher",
    "posterior_state_probs",
    "reconstruct_states",
    "region_from_fit",
    "run_experiment",
    "simulate",
    "test_equality_multi_degree",
    "test_equality_sr",
]
