"""Exception types raised across holofocus."""


class HolofocusError(Exception):
    """Base class for all library errors."""


class CodeTooLarge(HolofocusError, ValueError):
    pass


class RoiTooLarge(HolofocusError, ValueError):
    pass


class ImageTooSmall(HolofocusError, ValueError):
    pass


class OutOfRange(HolofocusError, ValueError):
    pass


class EmptySweep(HolofocusError, ValueError):
    pass


class ShapeMismatch(HolofocusError, ValueError):
    def __init__(self, expected, actual, what: str = "input"):
        self.expected = expected
        self.actual = actual
        super().__init__(f"{what} shape mismatch: expected {expected}, got {actual}")


class StaleCache(HolofocusError, RuntimeError):
    pass


class LabelOutOfRange(HolofocusError, ValueError):
    pass


class InvalidConfig(HolofocusError, ValueError):
    pass


class InsufficientData(HolofocusError, ValueError):
    def __init__(self, class_label: int, available: int, required: int):
        self.class_label = class_label
        super().__init__(
            f"class {class_label} has {available} images, needs at least {required}"
        )


class DivergenceDetected(HolofocusError, RuntimeError):
    def __init__(self, epoch: int):
        self.epoch = epoch
        super().__init__(f"non-finite loss at epoch {epoch}")


class MissingRawImages(HolofocusError, FileNotFoundError):
    pass


class NoSuchLayer(HolofocusError, KeyError):
    pass


class NotConvolutional(HolofocusError, TypeError):
    pass


class NotViT(HolofocusError, TypeError):
    pass


class StageFailed(HolofocusError, RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage '{stage}' failed: {cause}")
