"""Exception hierarchy shared across the package."""


class OEDError(Exception):
    """Base class for all package-specific failures."""


class ConfigError(OEDError):
    """Invalid or inconsistent run configuration."""


class ModelValidationError(OEDError):
    """Model matrices violate a structural requirement (shape, PSD, PD)."""


class NotPositiveDefiniteError(OEDError):
    """A matrix required to be positive definite is not, even after jitter."""


class DegenerateEnsembleError(OEDError):
    """Every prior draw's log-likelihood underflowed to -inf."""


class BudgetExhausted(OEDError):
    """Internal signal: the optimizer spent its evaluation budget."""
