"""Hierarchical Bayesian calibration of a shallow-ice glacier simulator.

The package is organised around the stages of the calibration pipeline:

- :mod:`hiersim.sia` - ice sheet geometry, the analytic reference solution,
  the compensatory mass balance and the finite-difference solver
- :mod:`hiersim.discrepancy` - random-walk residual operators and the
  spatial covariance models for the model error
- :mod:`hiersim.likelihood` - exact (dense and banded) and approximate
  log-likelihoods for the observed thickness series
- :mod:`hiersim.emulator` - singular-value-decomposition emulator of the
  solver output with pluggable coefficient regressors
- :mod:`hiersim.inference` - grid posteriors, summaries, the variance-field
  sampler and residual normality checks
- :mod:`hiersim.experiments` / :mod:`hiersim.cli` - reproducible experiment
  drivers and their command line front end
"""

from hiersim.config import GlacierConfig, InferenceSettings, load_config

__all__ = [
    "GlacierConfig",
    "InferenceSettings",
    "load_config",
]

__version__ = "0.1.0"
