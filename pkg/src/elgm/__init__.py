"""Approximate Bayesian inference for extended latent Gaussian models."""

from .errors import ElgmError
from .inference import (
    FitConfig,
    FitResult,
    SampleBatch,
    fit,
    joint_density,
    latent_summaries,
    laplace_objective,
    mixture_moments,
    sample_posterior,
    theta_summaries,
)
from .models import (
    ElgmModel,
    bernoulli_glmm,
    conjugate_gaussian,
    cox_ph_partial,
    gaussian_scale,
    poisson_aggregate,
)

__version__ = "0.1.0"

__all__ = [
    "ElgmError",
    "ElgmModel",
    "FitConfig",
    "FitResult",
    "SampleBatch",
    "bernoulli_glmm",
    "conjugate_gaussian",
    "cox_ph_partial",
    "fit",
    "gaussian_scale",
    "joint_density",
    "laplace_objective",
    "latent_summaries",
    "mixture_moments",
    "poisson_aggregate",
    "sample_posterior",
    "theta_summaries",
]
