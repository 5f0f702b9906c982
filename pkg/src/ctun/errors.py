"""Exception types raised across the package."""


class CtunError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(CtunError, ValueError):
    """A tensor had the wrong dimensions for an operation.

    Carries the operation name plus the expected and actual shapes so
    callers can report the mismatch without parsing the message.
    """

    def __init__(self, op, message, expected=None, got=None):
        self.op = op
        self.expected = expected
        self.got = got
        detail = message
        if expected is not None and got is not None:
            detail = f"{message} (expected {expected}, got {got})"
        super().__init__(f"{op}: {detail}")


class DTypeError(CtunError, TypeError):
    pass


class GradientError(CtunError, ArithmeticError):
    """Non-finite values showed up where a gradient or loss was needed."""


class SequenceError(CtunError, ValueError):
    pass


class WeightFileError(CtunError, ValueError):
    pass
