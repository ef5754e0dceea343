"""Exceptions raised by the structured sparsity toolkit."""


class SparsityError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(SparsityError, ValueError):
    """Operands do not have conformable shapes."""


class ConfigError(SparsityError, ValueError):
    """An experiment, training or regularization setting is invalid."""


class StructuralError(SparsityError):
    """A compaction plan cannot be applied to the model."""


class DatasetError(SparsityError, IOError):
    """A data file is missing, truncated or not in the expected format."""

    def __init__(self, message: str, path=None, offset: int = None, expected=None, found=None):
        details = []
        if path is not None:
            details.append(f"path={path}")
        if offset is not None:
            details.append(f"offset={offset}")
        if expected is not None or found is not None:
            details.append(f"expected={expected!r} found={found!r}")
        if details:
            message = f"{message} ({', '.join(details)})"
        super().__init__(message)
        self.path = path
        self.offset = offset
        self.expected = expected
        self.found = found


class CheckpointError(DatasetError):
    """A checkpoint file cannot be read back."""


class NumericalError(SparsityError):
    """Training or benchmarking produced numerically invalid output."""


class TrainingDiverged(NumericalError):
    def __init__(self, epoch: int, loss: float):
        super().__init__(f"Training diverged in epoch {epoch} (loss={loss})")
        self.epoch = epoch
        self.loss = loss


class ChecksumMismatch(NumericalError):
    def __init__(self, case_name: str, kernel: str, expected: float, found: float):
        super().__init__(
            f"Checksum mismatch for {case_name} on {kernel}: expected {expected!r}, found {found!r}"
        )
        self.case_name = case_name
        self.kernel = kernel
        self.expected = expected
        self.found = found
