class RegistrationError(Exception):
    """Base class for errors raised by the registration pipeline."""


class InputError(RegistrationError, ValueError):
    """Unreadable, malformed or inconsistent inputs (CLI exit code 2)."""


class NumericalError(RegistrationError, ArithmeticError):
    """Non-finite loss or gradient during optimization (CLI exit code 3)."""
