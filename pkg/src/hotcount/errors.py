"""Exception hierarchy."""


class HotcountError(Exception):
    """Base class for all package errors."""


class DimensionError(HotcountError, ValueError):
    pass


class ConfigurationError(HotcountError, ValueError):
    pass


class CompatibilityError(HotcountError, ValueError):
    """Sketches or tables that cannot be merged."""


class SchemaError(HotcountError, ValueError):
    """Observation or feature vector does not match the schema."""


class StateError(HotcountError, RuntimeError):
    """Operation not valid in the engine's current state."""


class BudgetExceededError(HotcountError, RuntimeError):
    """A window would spend more privacy budget than configured."""


class SnapshotFormatError(HotcountError, ValueError):
    """Base class for snapshot decoding failures."""


class BadMagicError(SnapshotFormatError):
    pass


class VersionError(SnapshotFormatError):
    pass


class ChecksumError(SnapshotFormatError):
    pass
