"""Exception types raised across the package."""


class StereoGuideError(Exception):
    """Base class for all package errors."""


class DataError(StereoGuideError, ValueError):
    """Input data could not be parsed or failed validation."""


class MalformedLine(DataError):
    def __init__(self, line_no, reason=""):
        self.line_no = line_no
        msg = f"malformed label line {line_no}"
        super().__init__(f"{msg}: {reason}" if reason else msg)


class MissingKey(DataError):
    def __init__(self, key):
        self.key = key
        super().__init__(f"missing calibration key {key!r}")


class MalformedMatrix(DataError):
    pass


class BadMagic(DataError):
    pass


class TruncatedPayload(DataError):
    pass


class InvalidDepth(DataError):
    def __init__(self, index, value=None):
        self.index = index
        super().__init__(f"invalid depth {value!r} at index {index}")


class ShapeMismatch(StereoGuideError, ValueError):
    pass


class LengthMismatch(StereoGuideError, ValueError):
    pass


class InvalidTargetBin(StereoGuideError, ValueError):
    pass


class NonFiniteValue(StereoGuideError, ArithmeticError):
    pass


class DivergenceDetected(StereoGuideError, ArithmeticError):
    def __init__(self, epoch, name="loss"):
        self.epoch = epoch
        super().__init__(f"non-finite {name} at epoch {epoch}")
