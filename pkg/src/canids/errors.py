"""Exception hierarchy shared by every module.

The CLI maps these onto exit codes: usage/config problems exit 1,
data/validation problems exit 2, runtime/numeric problems exit 3.
"""


class CanIdsError(Exception):
    """Base class for all package errors."""

    kind = "runtime"


class DomainError(CanIdsError, ValueError):
    """An argument lies outside the operation's domain."""

    kind = "data"


class ParseError(DomainError):
    """A CSV log row could not be parsed."""

    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class LogValidationError(DomainError):
    """A parsed log violates an ordering invariant."""

    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class ShapeError(DomainError):
    """Tensor shapes do not line up."""


class WarmupError(CanIdsError):
    """The ID window does not hold enough frames to emit a tensor yet."""

    kind = "data"


class UsageError(CanIdsError):
    """An API was called in the wrong order (e.g. backward before forward)."""

    kind = "usage"


class ConfigError(CanIdsError):
    kind = "usage"


class TrainingError(CanIdsError):
    """Training diverged (non-finite loss or gradient)."""

    def __init__(self, message: str, last_checkpoint=None):
        if last_checkpoint is not None:
            message = f"{message} (last good checkpoint: {last_checkpoint})"
        super().__init__(message)
        self.last_checkpoint = last_checkpoint


class QuantizationError(CanIdsError):
    pass


class BundleError(CanIdsError):
    kind = "data"


class BundleVersionError(BundleError):
    pass


class BundleShapeError(BundleError):
    pass


class ChecksumError(BundleError):
    def __init__(self, tensor: str):
        super().__init__(f"checksum mismatch for tensor {tensor!r}")
        self.tensor = tensor


class MissingTensorError(BundleError):
    def __init__(self, tensor: str, path):
        super().__init__(f"missing blob for tensor {tensor!r}: {path}")
        self.tensor = tensor
