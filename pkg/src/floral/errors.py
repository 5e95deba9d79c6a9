"""Exception hierarchy shared across the package."""


class FloralError(Exception):
    """Base class for all package errors."""


class ShapeError(FloralError, ValueError):
    pass


class RankError(FloralError, ValueError):
    pass


class DomainError(FloralError, ValueError):
    pass


class NumericalError(FloralError, ArithmeticError):
    """Raised when an iterative routine fails or a value leaves its valid range."""

    def __init__(self, message, iterations=None):
        super().__init__(message)
        self.iterations = iterations


class ConfigError(FloralError, ValueError):
    """Invalid configuration. ``field`` names the offending key when known."""

    def __init__(self, message, field=None):
        super().__init__(f"{field}: {message}" if field else message)
        self.field = field


class ProtocolError(FloralError, RuntimeError):
    pass


class DivergenceError(FloralError, ArithmeticError):
    """A client produced a non-finite loss during local training."""

    def __init__(self, round_idx, client_id, loss):
        super().__init__(
            f"client {client_id} diverged in round {round_idx} (loss={loss})")
        self.round_idx = round_idx
        self.client_id = client_id
        self.loss = loss


class MetricsFormatError(FloralError, ValueError):
    """A metrics file is malformed or carries an unsupported schema version."""

    def __init__(self, message, path=None, line=None):
        where = f"{path}:{line}: " if line is not None else (f"{path}: " if path else "")
        super().__init__(where + message)
        self.path = path
        self.line = line
