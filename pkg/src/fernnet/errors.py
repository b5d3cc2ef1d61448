"""Exception hierarchy shared by every fernnet module."""


class FernNetError(Exception):
    """Base class for all errors raised by fernnet."""


class DimensionError(FernNetError, ValueError):
    """Operand shapes are incompatible."""


class GeometryError(FernNetError, ValueError):
    """Spatial geometry (kernel, stride, padding, row count) is inconsistent."""


class ConfigError(FernNetError, ValueError):
    """A configuration value is out of range or unknown."""


class ContractError(FernNetError, RuntimeError):
    """An operation was invoked outside its preconditions."""


class DataError(FernNetError, ValueError):
    """Dataset contents are invalid (empty, bad labels, inconsistent sizes)."""


class TableError(FernNetError, KeyError):
    """An energy table lacks an entry required by a nonzero op tally."""


class SamplingError(FernNetError, RuntimeError):
    """No sample satisfying the requested margin could be drawn."""


class FormatError(FernNetError, ValueError):
    """A binary or text file is malformed."""


class VersionError(FormatError):
    """A file carries an unsupported format version."""
