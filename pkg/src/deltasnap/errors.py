"""Exception hierarchy shared across the package."""


class DeltaSnapError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(DeltaSnapError):
    """Invalid configuration value or combination."""


class DataError(DeltaSnapError):
    """Input data is unusable (NaN/Inf elements, codes out of range)."""


class ShapeError(DeltaSnapError):
    """Operands have incompatible shapes or lengths."""


class BoundsError(DeltaSnapError, IndexError):
    """Row or element index outside the valid range."""


class FormatError(DeltaSnapError):
    """Serialized bytes do not conform to the wire format."""


class IntegrityError(DeltaSnapError):
    """A checkpoint chain is broken or a checksum does not match."""


class StoreConflictError(DeltaSnapError):
    """A second checkpoint was begun while one is already in flight."""


class PreconditionError(DeltaSnapError):
    """Operation invoked before its prerequisites were satisfied."""


class StoreIOError(DeltaSnapError):
    """Object store I/O failed; the enclosing checkpoint is abortable."""
