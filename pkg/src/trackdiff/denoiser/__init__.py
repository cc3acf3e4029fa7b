"""Denoisers: the analytic Gaussian oracle and the trainable track network."""

from .conditions import ConditionSet, cfg_combine
from .oracle import (
    ClassConditionalOracle,
    GaussianWorld,
    OracleDenoiser,
    OracleError,
    oracle_conditional_moments,
    oracle_v,
)

__all__ = [
    "ConditionSet",
    "cfg_combine",
    "ClassConditionalOracle",
    "GaussianWorld",
    "OracleDenoiser",
    "OracleError",
    "oracle_conditional_moments",
    "oracle_v",
]
