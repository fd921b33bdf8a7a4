"""Estimation of the proportion of stillbirths occurring intrapartum.

A hierarchical Bayesian binomial-logit model with penalized spline trends,
fitted by a built-in no-U-turn Hamiltonian Monte Carlo sampler, followed by
coverage weighting to the country level and stillbirth-count weighting to
the region level, with holdout and cross-validation harnesses.
"""

__version__ = "0.1.0"
