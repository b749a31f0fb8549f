"""Exception types shared across the package."""


class MaGuPError(Exception):
    """Base class for every error this package raises deliberately."""


class ShapeError(MaGuPError):
    """Operands have incompatible or invalid extents."""


class ConfigError(MaGuPError):
    """A configuration value is outside its allowed range or set."""


class NumericsError(MaGuPError):
    """A forward operation produced NaN or Inf."""


class ContractError(MaGuPError):
    """An operation was invoked outside its contract."""


class CheckpointError(MaGuPError):
    """A checkpoint file is malformed, truncated, or mismatched."""


class DataError(MaGuPError):
    """A dataset file is missing, undecodable, or inconsistent."""
