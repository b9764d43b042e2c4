"""Exception hierarchy shared by every stage of the toolkit."""


class TsvizError(Exception):
    """Base class for all toolkit errors."""


class DimensionError(TsvizError, ValueError):
    pass


class ConfigurationError(TsvizError, ValueError):
    pass


class ContractError(TsvizError, ValueError):
    pass


class StateError(TsvizError, RuntimeError):
    pass


class NumericalError(TsvizError, ArithmeticError):
    pass


class DataError(TsvizError, ValueError):
    pass


class ParseError(DataError):
    def __init__(self, message, row=None, col=None):
        if row is not None:
            message = f"{message} at (row {row}, col {col})" if col is not None else f"{message} at row {row}"
        super().__init__(message)
        self.row = row
        self.col = col


class CheckpointError(DataError):
    """Raised when a checkpoint or affinity cache cannot be loaded."""


class TrainingDiverged(NumericalError):
    """Loss became non-finite; carries the last good parameter snapshot."""

    def __init__(self, message, epoch, last_good, checkpoint=None):
        super().__init__(message)
        self.epoch = epoch
        self.last_good = last_good
        self.checkpoint = checkpoint
