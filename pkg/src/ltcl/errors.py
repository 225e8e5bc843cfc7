"""Exception taxonomy shared across the package."""


class LtclError(Exception):
    """Base class for all package errors."""


class ShapeError(LtclError):
    """Structural mismatch between operand shapes."""


class ContractError(LtclError):
    """An API precondition was violated by the caller."""


class DegenerateInputError(LtclError):
    """Input is numerically degenerate (e.g. near-zero norm before normalization)."""


class ConfigError(LtclError):
    """Invalid or unknown configuration."""


class SamplingError(LtclError):
    """Rejection sampling exhausted its attempt budget."""


class NumericalError(LtclError):
    """Non-finite value produced where finiteness is required."""


class OracleError(LtclError):
    """A verification oracle could not be evaluated."""


class DataFormatError(LtclError):
    """Malformed persisted dataset or checkpoint file."""
