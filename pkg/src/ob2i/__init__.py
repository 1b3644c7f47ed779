"""Optimistic exploration with bootstrapped ensembles and backward induction.

Desk-scale implementations of ensemble UCB bonuses, episodic backward
updates (BEBU family and OB2I), exact LSVI-UCB on linear MDPs, and a
numerical check that ensemble disagreement matches the linear bonus.
"""

__version__ = "0.1.0"


class Ob2iError(Exception):
    """Base class for errors raised by this package."""


class InvalidInputError(Ob2iError, ValueError):
    pass


class DimensionError(Ob2iError, ValueError):
    pass


class NotSPDError(Ob2iError, ValueError):
    pass


class NumericalDegeneracyError(Ob2iError, ArithmeticError):
    pass


class ContractViolation(Ob2iError, RuntimeError):
    pass


class GenerationFailure(Ob2iError, RuntimeError):
    pass


class UnreachableError(Ob2iError, ValueError):
    pass


class TrainingDivergence(Ob2iError, FloatingPointError):
    pass


class ConfigError(Ob2iError, ValueError):
    """Invalid configuration; ``key`` names the offending field."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key
