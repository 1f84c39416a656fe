"""Exception types shared across the package."""


class ValidationError(ValueError):
    """Input data or configuration violates a documented contract."""


class NumericalError(RuntimeError):
    """A numerical procedure failed (non-finite density, all chains diverged, ...)."""
