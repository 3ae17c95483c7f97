"""
Exception hierarchy for vgrpo_lab.

Errors are grouped by how the CLI reacts to them: configuration problems exit
with status 2, numerical failures with status 3.
"""
from typing import Any, Dict, Optional


class VgrpoLabError(Exception):
    """Base class for every error raised by vgrpo_lab."""

    def __init__(self, message: str, details: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.message = message
        self.details = details or {}


class ConfigurationError(VgrpoLabError):
    """Invalid shapes, grids, presets or other setup problems."""
    pass


class ConfigValidationError(ConfigurationError):
    """Raised when a config file field fails validation."""

    def __init__(self, message: str, field: Optional[str] = None):
        super().__init__(f"{field}: {message}" if field else message)
        self.field = field


class SingularityError(ConfigurationError):
    """Raised when a schedule quantity is evaluated at a singular time."""
    pass


class UsageError(VgrpoLabError):
    """Raised when an API is called outside its contract."""
    pass


class NumericalError(VgrpoLabError):
    """Raised for NaN gradients, non-finite losses and ratios."""

    def __init__(self, message: str, quantity: Optional[str] = None):
        super().__init__(message, details={"quantity": quantity} if quantity else None)
        self.quantity = quantity


EXIT_OK = 0
EXIT_CONFIG_ERROR = 2
EXIT_NUMERIC_FAILURE = 3


def exit_code_for(error: BaseException) -> int:
    """Map an exception to the CLI exit status."""
    if isinstance(error, ConfigurationError):
        return EXIT_CONFIG_ERROR
    if isinstance(error, NumericalError):
        return EXIT_NUMERIC_FAILURE
    return 1
