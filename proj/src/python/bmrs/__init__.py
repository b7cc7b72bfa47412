"""Bayesian model reduction for structured pruning."""

from ._core import (
    LOG_HI,
    LOG_LO,
    ConfigError,
    ContractError,
    DomainError,
    ParseError,
    delta_f_loguniform,
    delta_f_lognormal,
    kl,
    mean_theta,
    sample,
    score_checkpoint,
    snr,
    spearman,
    variance_theta,
    verify,
)

__all__ = [
    "LOG_HI",
    "LOG_LO",
    "ConfigError",
    "ContractError",
    "DomainError",
    "ParseError",
    "delta_f_loguniform",
    "delta_f_lognormal",
    "kl",
    "mean_theta",
    "sample",
    "score_checkpoint",
    "snr",
    "spearman",
    "variance_theta",
    "verify",
]
