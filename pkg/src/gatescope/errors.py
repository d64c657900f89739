"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class GatescopeError(Exception):
    exit_code = 1


class UsageError(GatescopeError):
    exit_code = 2


class FormatError(GatescopeError):
    """Malformed checkpoint, header, adapter file or config."""

    exit_code = 3


class ShapeError(GatescopeError, ValueError):
    """Dimension mismatch between operands."""

    exit_code = 4


class PairingError(GatescopeError):
    """Tensors or module keys that should correspond do not."""

    exit_code = 4


class DivergenceError(GatescopeError):
    exit_code = 5

    def __init__(self, step: int, loss: float, what: str = "loss"):
        detail = f"non-finite loss {loss!r}" if what == "loss" else f"non-finite {what} (loss {loss!r})"
        super().__init__(f"training diverged at step {step}: {detail}")
        self.step = step
        self.loss = loss
