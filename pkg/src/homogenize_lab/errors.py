class ConfigError(ValueError):
    """Invalid configuration; ``path`` locates the offending field."""

    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


class NumericQualityError(RuntimeError):
    """A numerical invariant failed (flow ordering, PSD, coefficient consistency)."""


class FlowMonotonicityError(NumericQualityError):
    def __init__(self, message: str, trajectory_ids=()):
        self.trajectory_ids = list(trajectory_ids)
        super().__init__(message)
