"""Exception hierarchy shared by all modules."""


class InterhomError(Exception):
    """Base class for every error raised by this package."""


class InvalidInputError(InterhomError, ValueError):
    pass


class DimensionMismatchError(InvalidInputError):
    pass


class GridMismatchError(InvalidInputError):
    pass


class SingularSolveError(InterhomError):
    """The discrete null space is not one-dimensional."""


class CenteringError(InterhomError):
    """Corrector equation has no solution: the drift is not centered."""


class ConvergenceError(InterhomError):
    pass


class DiscretizationError(InterhomError):
    """The discrete solution violates a property the continuum one has."""


class TruncationError(InterhomError):
    """Truncated strip too short to resolve the far-field limit."""


class PathAbortedError(InterhomError):
    """A simulated path left the set of finite states."""


class HorizonError(InterhomError):
    """Requested time beyond the simulated horizon, or too many censored paths."""


class DomainError(InterhomError):
    """Test function is not in the domain of the limiting generator."""


class DegenerateParameterError(InterhomError):
    pass


class ConfigError(InterhomError):
    def __init__(self, message, *, line=None, field=None):
        self.line = line
        self.field = field
        prefix = []
        if field is not None:
            prefix.append(f"field '{field}'")
        if line is not None:
            prefix.append(f"line {line}")
        super().__init__(f"{', '.join(prefix)}: {message}" if prefix else message)


class StageError(InterhomError):
    def __init__(self, stage, cause):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage '{stage}' failed: {type(cause).__name__}: {cause}")
