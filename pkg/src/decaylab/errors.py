"""Exception types shared across the package."""


class ValidationError(ValueError):
    """A configuration or input violates a documented invariant."""


class ScheduleRangeError(ValueError):
    """A step index lies outside the window a schedule is defined on."""


class NumericError(ArithmeticError):
    """A non-finite value appeared where a finite one is required."""


class FormatError(ValueError):
    """A checkpoint or record file is malformed."""
