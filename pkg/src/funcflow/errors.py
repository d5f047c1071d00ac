"""Exception types shared across the package."""


class FuncflowError(Exception):
    """Base class for all funcflow errors."""


class InvalidConfigurationError(FuncflowError):
    """A configuration value is outside its admissible range."""


class InvalidArgumentError(FuncflowError, ValueError):
    """An argument is malformed or inconsistent with its companions."""


class IncompatibleMeshError(InvalidArgumentError):
    """Two objects defined on different meshes were combined."""


class NumericalFailureError(FuncflowError):
    """An iterative solve failed to converge; indicates a bug upstream."""


class UndefinedMetricError(FuncflowError):
    """A diagnostic ratio has a vanishing denominator."""
