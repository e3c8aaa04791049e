"""Reflected SDEs with singular drift: Zvonkin transform, boundary test functions
and pathwise-uniqueness diagnostics on smooth bounded domains."""

from .errors import (
    ConfigError,
    CoverFailure,
    DomainError,
    InfeasibleAngle,
    InvalidRange,
    LedgerViolation,
    MissingConstant,
    NoAdmissibleT,
    NonConvergence,
    OutsideTube,
    QuadratureFailure,
    ReflectsdeError,
)
from .geometry import DomainSpec, disk, ellipse, interval

__all__ = [
    "ConfigError",
    "CoverFailure",
    "DomainError",
    "DomainSpec",
    "InfeasibleAngle",
    "InvalidRange",
    "LedgerViolation",
    "MissingConstant",
    "NoAdmissibleT",
    "NonConvergence",
    "OutsideTube",
    "QuadratureFailure",
    "ReflectsdeError",
    "disk",
    "ellipse",
    "interval",
]
