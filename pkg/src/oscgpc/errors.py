"""Exception types shared across the package."""


class OscgpcError(Exception):
    """Base class for all package errors."""


class ConfigurationError(OscgpcError):
    """Invalid configuration, unsupported option, or malformed input file."""


class SingularWeightError(OscgpcError):
    """A quadrature weight function is non-finite or a denominator vanished."""


class NonlinearEvaluationError(OscgpcError):
    """The nonlinearity produced a non-finite value at a quadrature node."""


class ExtrapolationError(OscgpcError):
    """An interpolation query fell outside the tabulated range."""


class PhaseInversionError(OscgpcError):
    """The bracketing search for the phase inverse failed."""


class GridMismatchError(OscgpcError):
    """Two profiles share no common grid points."""


class SolverError(OscgpcError):
    """A solver hit an unrecoverable numerical condition."""
