"""Exception types shared across the toolkit."""


class MrfError(Exception):
    """Base class for all toolkit errors."""


class DomainError(MrfError):
    """Input outside the physically or numerically valid domain."""


class InvalidStateError(MrfError):
    """EPG state carries non-finite values."""


class DegenerateSignalError(DomainError):
    """Signal with (numerically) zero norm cannot be matched."""


class ShapeError(MrfError):
    """Tensor shapes incompatible with the requested operation."""


class FormatError(MrfError):
    """On-disk artifact does not conform to its binary/text format."""


class TrainingDivergedError(MrfError):
    """Training loss became non-finite."""

    def __init__(self, epoch, message=None):
        self.epoch = epoch
        super().__init__(message or f"training diverged at epoch {epoch}")
