"""Exception hierarchy; each family maps to one CLI exit code."""


class TriadnetError(Exception):
    exit_code = 1


class InputError(TriadnetError, ValueError):
    """Malformed or inconsistent input data."""

    exit_code = 3


class SizeError(InputError):
    """Array dimensions or node counts are incompatible."""


class DomainError(InputError):
    """An argument lies outside the domain of an operation."""


class ConfigError(TriadnetError, ValueError):
    exit_code = 4


class NumericError(TriadnetError, ArithmeticError):
    exit_code = 5


class ConvergenceError(NumericError):
    """An iterative routine hit its cap; ``last`` carries the final iterate."""

    exit_code = 6

    def __init__(self, message, last=None):
        super().__init__(message)
        self.last = last
