"""Exception hierarchy shared by all modules."""


class SNMMError(Exception):
    """Base class for package errors."""


class DomainError(SNMMError, ValueError):
    """A query point lies outside the workspace."""


class ConfigError(SNMMError, ValueError):
    """Invalid configuration value or scenario file."""


class ParameterError(SNMMError, ValueError):
    """Invalid distribution parameters (e.g. non-SPD covariance)."""


class GridMismatchError(SNMMError, ValueError):
    """Two density fields live on different quadrature grids."""


class BlockedComponentError(SNMMError):
    """A component's Gaussian mass is (almost) entirely occupied."""


class ZeroDensityError(SNMMError):
    """A sample has zero density under every mixture component."""

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class FitDivergenceError(SNMMError):
    """The learner's NLL became non-finite or increased beyond tolerance."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = list(trace or [])
