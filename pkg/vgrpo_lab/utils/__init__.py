from .exceptions import (ConfigValidationError, ConfigurationError, NumericalError, SingularityError, UsageError,
                         VgrpoLabError)
from .seeding import Stream, derive_rng, derive_seed

__all__ = [
    'ConfigValidationError',
    'ConfigurationError',
    'NumericalError',
    'SingularityError',
    'UsageError',
    'VgrpoLabError',
    'Stream',
    'derive_rng',
    'derive_seed'
]
