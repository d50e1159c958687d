"""Exception types shared across the package."""


class KStripError(Exception):
    """Base class for all package-specific errors."""


class DimensionError(KStripError):
    """Shapes of the operands do not satisfy the operation's contract."""


class UnsupportedSizeError(KStripError):
    """Spatial size not supported (FFT requires power-of-two dimensions)."""


class ConfigError(KStripError):
    """Inconsistent or invalid configuration."""


class ContractError(KStripError):
    """An API precondition was violated by the caller."""


class NumericError(KStripError):
    """Non-finite values where finite ones are required."""


class FormatError(KStripError):
    """File magic or version does not match the expected on-disk format."""


class IntegrityError(KStripError):
    """File is truncated or its checksum does not match."""


class DegenerateFrameError(KStripError):
    """Periphery frame width would cover half the array or more."""
