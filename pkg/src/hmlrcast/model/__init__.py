"""Hierarchical multinomial / Dirichlet-multinomial logistic regression models."""

from .density import (
    Posterior,
    lkj_log_density,
    lkj_log_normalizer,
    log_likelihood,
    log_pmf,
    log_posterior_and_grad,
    log_prior,
    log_prior_terms,
)
from .spec import (
    ALL_SPECS,
    BASELINE,
    HMLR_SPECS,
    Covariance,
    DesignMatrix,
    Likelihood,
    ModelSpec,
    Trend,
    parse_specs,
)
from .transform import BaselineParams, HierParams, Layout, layout, param_dim, transform, untransform

__all__ = [
    "ALL_SPECS", "BASELINE", "HMLR_SPECS", "BaselineParams", "Covariance", "DesignMatrix",
    "HierParams", "Layout", "Likelihood", "ModelSpec", "Posterior", "Trend", "layout",
    "lkj_log_density", "lkj_log_normalizer", "log_likelihood", "log_pmf",
    "log_posterior_and_grad", "log_prior", "log_prior_terms", "param_dim", "parse_specs",
    "transform", "untransform",
]
