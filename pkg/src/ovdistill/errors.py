"""Exception types shared across the package."""


class OvdError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(OvdError):
    """Invalid or inconsistent configuration."""


class UnknownToken(OvdError):
    """A word or token id is not part of the vocabulary."""


class EmptyCaption(OvdError):
    """Caption text contains no tokens."""


class UnknownConcept(OvdError):
    """A caption concept has no entry in the scoring vocabulary."""


class DegenerateInput(OvdError):
    """Input is structurally valid but too degenerate to score (e.g. no regions)."""


class ParseError(OvdError):
    """A persisted file is malformed. Carries the offending line number."""

    def __init__(self, message, line_number=None):
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)
        self.line_number = line_number
