"""Exception types shared across the package."""


class LiteRecError(Exception):
    """Base class for all package errors."""


class DimensionError(LiteRecError, ValueError):
    pass


class ContractError(LiteRecError, ValueError):
    """An operation was called in violation of its preconditions."""


class EmptyPoolError(ContractError):
    pass


class DataError(LiteRecError):
    pass


class FormatError(LiteRecError):
    """Binary file has the wrong magic or an unreadable layout."""


class VersionError(FormatError):
    pass


class ChecksumError(FormatError):
    pass


class TrainingError(LiteRecError):
    pass
