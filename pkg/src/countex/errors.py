"""Exception types shared across the package.

Every error raised on a contract boundary derives from CountexError so the
command line layer can map failures onto stable exit codes.
"""

from __future__ import annotations


class CountexError(Exception):
    """Base class for all package-specific failures."""


class ShapeError(CountexError, ValueError):
    """Operands with incompatible shapes. The message names both shapes."""


class ConfigError(CountexError, ValueError):
    """Invalid configuration value or an unusable backend request."""


class ContractError(CountexError, ValueError):
    """A call violated a documented precondition (not a shape problem)."""


class CapacityError(CountexError, ValueError):
    """A scene asked for more instances than the grid has cells."""


class SceneFormatError(CountexError, ValueError):
    """Scene file failed validation. Carries a JSON pointer to the field."""

    def __init__(self, pointer: str, reason: str):
        self.pointer = pointer
        self.reason = reason
        super().__init__(f"{pointer}: {reason}")


class NonFiniteLossError(CountexError, ArithmeticError):
    """Training produced a non-finite loss term."""

    def __init__(self, term: str, step: int):
        self.term = term
        self.step = step
        super().__init__(f"loss term {term} became non-finite at step {step}")
