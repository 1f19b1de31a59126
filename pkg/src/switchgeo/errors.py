"""Exception types shared across the package."""


class SwitchgeoError(Exception):
    """Base class."""


class ConfigError(SwitchgeoError, ValueError):
    """Invalid configuration; ``errors`` holds ``(json_pointer, message)`` pairs."""

    def __init__(self, errors):
        if isinstance(errors, str):
            errors = [("", errors)]
        self.errors = list(errors)
        lines = [f"{path or '/'}: {msg}" for path, msg in self.errors]
        super().__init__("; ".join(lines))


class NumericalError(SwitchgeoError, ArithmeticError):
    """Numerical breakdown in ``module`` at time/batch ``index``."""

    def __init__(self, message, module="", index=None):
        self.module = module
        self.index = index
        where = f" [{module}" + (f" @ {index}" if index is not None else "") + "]" if module else ""
        super().__init__(message + where)


class DivergenceError(NumericalError):
    """A free rollout left the finite/bounded region; ``record`` keeps the valid prefix."""

    def __init__(self, message, index, record=None):
        super().__init__(message, module="alrnn_core", index=index)
        self.record = record
