"""Exception hierarchy shared by the library and the command line.

Each class carries the exit code the CLI maps it to.
"""

from __future__ import annotations


class FlowforgeError(Exception):
    exit_code = 1


class DomainError(FlowforgeError, ValueError):
    """A parameter or input lies outside the mathematical domain of an operation."""

    exit_code = 1


class ResourceError(FlowforgeError, RuntimeError):
    """An enumeration or grid would exceed a configured size cap."""

    exit_code = 2


class NumericError(FlowforgeError, ArithmeticError):
    """Non-finite values or failed numerical guards."""

    exit_code = 3


class ResolutionError(NumericError):
    """A scale (mu or epsilon) is too small for the grid it lives on."""
