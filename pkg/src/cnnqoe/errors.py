"""Exception hierarchy shared by all modules."""


class CnnQoeError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(CnnQoeError, ValueError):
    pass


class ParameterError(CnnQoeError, ValueError):
    pass


class ConfigError(CnnQoeError, ValueError):
    """Invalid model configuration. ``violations`` lists each problem found."""

    def __init__(self, violations):
        if isinstance(violations, str):
            violations = [violations]
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


class TrainingError(CnnQoeError, RuntimeError):
    """Raised on divergence or non-finite gradients.

    ``history`` carries the loss history recorded up to the failure and
    ``layer`` names the offending parameter when known.
    """

    def __init__(self, message, history=None, layer=None):
        super().__init__(message)
        self.history = history
        self.layer = layer


class SearchError(CnnQoeError, RuntimeError):
    pass


class DataError(CnnQoeError, ValueError):
    pass


class ParseError(DataError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class SplitError(DataError):
    pass


class CorrelationError(CnnQoeError, ValueError):
    """Correlation is undefined (constant input)."""


class ModelFileError(CnnQoeError, IOError):
    pass
