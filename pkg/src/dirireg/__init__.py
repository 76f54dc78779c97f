"""Bayesian penalized-likelihood Dirichlet regression.

The mean of every composition dimension is modelled on its own logit scale,
the precision on the log scale, and the sum-to-one restriction is imposed
softly through a hierarchical prior.  A maximum-likelihood baseline with a
reference dimension and a simulation harness comparing both are included.
"""

__version__ = "0.1.0"

from .dirichlet import DirichletParams, fit_ml, fit_moments, log_density, rdirichlet, replace_zeros  # noqa: E402
from .model import CompositionDataset, ModelConfig, load_csv, log_penalized_posterior  # noqa: E402
from .sampler import SamplerConfig, run, summarize  # noqa: E402
from .baseline import fit_ml_regression, ml_intervals, wald_test  # noqa: E402
from .metrics import aitchison_distance, clr, sce  # noqa: E402

__all__ = [
    "__version__", "DirichletParams", "fit_ml", "fit_moments", "log_density", "rdirichlet", "replace_zeros",
    "CompositionDataset", "ModelConfig", "load_csv", "log_penalized_posterior",
    "SamplerConfig", "run", "summarize", "fit_ml_regression", "ml_intervals", "wald_test",
    "aitchison_distance", "clr", "sce",
]
