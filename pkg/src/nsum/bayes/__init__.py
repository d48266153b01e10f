"""Hierarchical Bayesian ARD models fitted by Metropolis-within-Gibbs."""

from .maltiel import MaltielPriors, fit_maltiel
from .mcmc import ChainDiagnostics, MCMCConfig, ModelError, PosteriorDraws, diagnostics, ess, posterior_size, split_rhat
from .overdispersed import fit_overdispersed, renormalize_betas
from .teo import TeoPriors, fit_teo

__all__ = [
    "ChainDiagnostics",
    "MCMCConfig",
    "MaltielPriors",
    "ModelError",
    "PosteriorDraws",
    "TeoPriors",
    "diagnostics",
    "ess",
    "fit_maltiel",
    "fit_overdispersed",
    "fit_teo",
    "posterior_size",
    "renormalize_betas",
    "split_rhat",
]
