"""Exception hierarchy. CLI exit codes key off these classes."""


class BundleNATError(Exception):
    """Base class for all package errors."""


class DimensionError(BundleNATError, ValueError):
    pass


class ContractError(BundleNATError, ValueError):
    pass


class StateError(BundleNATError, RuntimeError):
    pass


class ConfigError(BundleNATError, ValueError):
    pass


class DataFormatError(BundleNATError, ValueError):
    """Malformed or inconsistent on-disk data (parse, range, version)."""


class IdRangeError(DataFormatError):
    pass


class TrainingDivergedError(BundleNATError, FloatingPointError):
    pass
