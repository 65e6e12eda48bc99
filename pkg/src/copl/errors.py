class FileFormatError(ValueError):
    """Base class for malformed CPFC1/COPL1 files."""


class BadMagic(FileFormatError):
    pass


class RecordLengthMismatch(FileFormatError):
    pass


class DimensionMismatch(FileFormatError):
    pass


class NonFiniteLoss(FloatingPointError):
    def __init__(self, step: int, lr: float, loss: float):
        super().__init__(f"non-finite loss {loss!r} at step {step} (lr={lr:g})")
        self.step = step
        self.lr = lr
        self.loss = loss
