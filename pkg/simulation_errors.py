#!/usr/bin/env python3
"""
Exception hierarchy shared by the simulators and the CLI.

Every error carries the process exit code the CLI should return for it.
"""


class AgepinError(Exception):
    """Base class for all engine errors"""

    exit_code = 1


class ConfigError(AgepinError):
    exit_code = 2


class ParseError(ConfigError):
    """Config file could not be read or decoded"""


class ValidationError(ConfigError):
    """Config decoded but one or more fields are invalid"""

    def __init__(self, field_errors):
        if isinstance(field_errors, str):
            field_errors = [field_errors]
        self.field_errors = list(field_errors)
        super().__init__("; ".join(self.field_errors))


class ModelError(AgepinError):
    """Invalid model ingredient (parameters, distribution, kernel)"""

    exit_code = 2


class KernelError(ModelError):
    """Age kernel used outside the setting it supports"""


class NonCompactSupport(ModelError):
    """Death rate does not diverge at the maximal age"""


class CflViolation(AgepinError):
    exit_code = 3

    def __init__(self, violations):
        if isinstance(violations, str):
            violations = [violations]
        self.violations = list(violations)
        super().__init__("CFL bound violated: " + "; ".join(self.violations))


class Diverged(AgepinError):
    exit_code = 4


class NotConverged(AgepinError):
    """Iteration budget exhausted; the last iterate is kept for inspection"""

    exit_code = 5

    def __init__(self, message, last_iterate=None, residual=None, result=None):
        super().__init__(message)
        self.last_iterate = last_iterate
        self.residual = residual
        self.result = result
