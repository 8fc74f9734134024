"""Exception types shared across the package."""


class ShapeError(ValueError):
    """A tensor does not have the shape an operation requires."""


class NotOneHotError(ValueError):
    """A target map is not one-hot encoded."""


class NotFiniteError(ValueError):
    """A tensor contains NaN or infinity."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class AllPatchesRejectedError(RuntimeError):
    """Every candidate patch was rejected by the confidence filter."""

    def __init__(self, message, attempts=0):
        super().__init__(message)
        self.attempts = attempts


class ConfigError(ValueError):
    """An experiment configuration is malformed or inconsistent."""


class StageError(RuntimeError):
    """A pipeline stage failed; partial artifacts stay on disk."""

    def __init__(self, message, stage):
        super().__init__(message)
        self.stage = stage
