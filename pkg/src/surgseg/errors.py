"""Exception taxonomy shared across the package.

Exit-code mapping used by the CLI: 2 = usage/configuration, 3 = data,
4 = numeric failure. Library code raises these; only the CLI translates
them into process exit codes.
"""

from __future__ import annotations


class SurgSegError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ConfigError(SurgSegError, ValueError):
    """Invalid configuration: bad knob values, empty target sets, missing seeds."""

    exit_code = 2


class InputError(SurgSegError, ValueError):
    """Rejected input: shape mismatch, out-of-bounds prompt, empty mask."""

    exit_code = 3


class DataError(SurgSegError):
    """Dataset problem: missing file, frame/mask mismatch, unresolvable seed."""

    exit_code = 3


class NumericError(SurgSegError, ArithmeticError):
    """Non-finite values where finite ones are required."""

    exit_code = 4
