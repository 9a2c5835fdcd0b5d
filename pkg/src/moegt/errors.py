"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: configuration problems -> 2,
data problems -> 3, numeric failures -> 4.
"""


class MoegtError(Exception):
    """Base class for all package errors."""


class ConfigError(MoegtError, ValueError):
    """Invalid model or run configuration."""


class ParameterError(ConfigError):
    """An argument lies outside its admissible range."""


class DimensionError(MoegtError, ValueError):
    """Tensor shapes are incompatible."""


class DataError(MoegtError, ValueError):
    """Input data is unreadable or violates the event schema."""


class EventParseError(DataError):
    """One or more lines of an event file failed validation.

    ``problems`` holds ``(line_number, message)`` pairs, 1-based.
    """

    def __init__(self, path, problems):
        self.path = str(path)
        self.problems = list(problems)
        shown = "; ".join(f"line {n}: {msg}" for n, msg in self.problems[:10])
        more = f" (+{len(self.problems) - 10} more)" if len(self.problems) > 10 else ""
        super().__init__(f"{self.path}: {len(self.problems)} invalid line(s): {shown}{more}")


class EmptySubsetError(DataError):
    """A subset selector matched no events."""


class NumericError(MoegtError, ArithmeticError):
    """A NaN or infinity appeared where finite values are required."""
