"""Exception hierarchy shared by the library modules and the CLI."""


class AVHearingError(Exception):
    """Base class for every error raised by this package."""


class InvalidInputError(AVHearingError, ValueError):
    """Malformed, non-finite or out-of-range input."""


class InvalidModelError(InvalidInputError):
    """Mixture parameters that violate the model invariants."""


class DegenerateFitError(AVHearingError, ArithmeticError):
    """A least-squares fit with no unique solution."""


class SyncOrderError(InvalidInputError):
    """Timestamps going backwards within one scope."""
