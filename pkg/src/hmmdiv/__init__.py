"""Optimal dividends under a hidden Markov drift: Wonham filter, HJB solver, Monte-Carlo checks."""

from .model import FLOOR, FilterState, ModelParams, ParameterError, nu_from_pi, paper_params, pi_from_nu, two_state, validate

__all__ = [
    "FLOOR",
    "FilterState",
    "ModelParams",
    "ParameterError",
    "nu_from_pi",
    "paper_params",
    "pi_from_nu",
    "two_state",
    "validate",
]
