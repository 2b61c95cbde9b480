"""Exception hierarchy shared across the package."""


class MemSearchError(Exception):
    """Base class for all package errors."""


class ConfigError(MemSearchError, ValueError):
    """Invalid configuration value. ``field`` names the offending key."""

    def __init__(self, field, message):
        self.field = field
        super().__init__(f"{field}: {message}")


class ShapeError(MemSearchError, ValueError):
    pass


class SingularScheduleError(MemSearchError, ValueError):
    pass


class TerminalStepError(MemSearchError, ValueError):
    pass


class MaskError(MemSearchError, ValueError):
    pass


class DecompositionError(MemSearchError, RuntimeError):
    def __init__(self, block, message="SVD did not converge"):
        self.block = block
        super().__init__(f"block {block}: {message}")


class DivergenceError(MemSearchError, FloatingPointError):
    def __init__(self, step, message="non-finite loss"):
        self.step = step
        super().__init__(f"step {step}: {message}")


class VocabError(MemSearchError, ValueError):
    pass


class MatrixError(MemSearchError, ValueError):
    pass


class EmptyResultError(MemSearchError, ValueError):
    pass


class TransferError(MemSearchError, ValueError):
    pass


class CheckpointError(MemSearchError, ValueError):
    pass
