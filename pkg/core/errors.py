class FasError(Exception):
    """Base class for every error raised by the toolkit."""
    exit_code = 1


class InvalidArgumentError(FasError, ValueError):
    exit_code = 2


class ContractError(FasError):
    """A data precondition was violated (wrong label, overlapping splits, ...)."""
    exit_code = 3


class DataError(FasError):
    exit_code = 3


class ImageDecodeError(DataError):
    def __init__(self, message, offset=0):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class CheckpointError(DataError):
    def __init__(self, message, tensor=None):
        if tensor is not None:
            message = f"{message} [tensor '{tensor}']"
        super().__init__(message)
        self.tensor = tensor


class NumericError(FasError):
    exit_code = 4

    def __init__(self, message, tensor=None):
        if tensor is not None:
            message = f"{message} [tensor '{tensor}']"
        super().__init__(message)
        self.tensor = tensor


class StageError(FasError):
    """Wraps the failure of one pipeline stage, keeping the stage name."""

    def __init__(self, stage, cause):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause

    @property
    def exit_code(self):
        return exit_code_for(self.cause)


def exit_code_for(exc):
    """CLI exit code for an exception: 2 usage, 3 data, 4 numeric."""
    if isinstance(exc, FasError):
        return exc.exit_code
    if isinstance(exc, (OSError, KeyError)):
        return 3
    if isinstance(exc, (ValueError, TypeError)):
        return 2
    return 1
