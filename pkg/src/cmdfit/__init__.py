"""cmdfit: Bayesian MCMC fitting of star-cluster parameters and per-star
masses/memberships from multi-filter photometry against a tabulated
stellar-evolution model."""

from ._core import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "__version__"]
