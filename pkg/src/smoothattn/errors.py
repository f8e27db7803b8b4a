"""Exception types raised across the package."""


class SmoothAttnError(Exception):
    """Base class for every structured error raised by this package."""


class ShapeError(SmoothAttnError, ValueError):
    """Operands have incompatible shapes."""

    def __init__(self, op, *shapes, detail=""):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        shown = " vs ".join(str(s) for s in self.shapes)
        msg = f"{op}: incompatible shapes {shown}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class DomainError(SmoothAttnError, ValueError):
    """An operation received input outside its mathematical domain."""


class CovarianceError(DomainError):
    """A predicted covariance is not numerically positive-definite."""

    def __init__(self, message, step=None, agent=None):
        self.step = step
        self.agent = agent
        super().__init__(message)


class DataError(SmoothAttnError, ValueError):
    """Malformed or unusable trajectory data."""

    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + message)


class ConfigError(SmoothAttnError, ValueError):
    """Invalid configuration value or key."""

    def __init__(self, message, key=None):
        self.key = key
        super().__init__(f"{key}: {message}" if key else message)


class TrainingError(SmoothAttnError, RuntimeError):
    """Training diverged or could not proceed."""

    def __init__(self, message, step=None):
        self.step = step
        super().__init__(f"step {step}: {message}" if step is not None else message)
