"""Exception types shared across the package."""


class MrigenError(Exception):
    """Base class for all package errors."""


class InvalidInput(MrigenError, ValueError):
    """Raised when arguments violate an operation's preconditions."""


class PromptError(InvalidInput):
    """Raised for malformed prompts. ``token`` names the offending word."""

    def __init__(self, message, token=None):
        super().__init__(message)
        self.token = token


class TokenizationError(PromptError):
    pass


class ManifestError(InvalidInput):
    """A manifest entry failed to load. ``line`` is 1-based."""

    def __init__(self, line, message):
        super().__init__(f"line {line}: {message}")
        self.line = line


class NumericError(MrigenError, ArithmeticError):
    """Raised when a computation produces non-finite values.

    ``where`` names the layer or step at which the problem was detected.
    """

    def __init__(self, message, where=None):
        super().__init__(message)
        self.where = where


class NotPSDError(NumericError):
    pass
