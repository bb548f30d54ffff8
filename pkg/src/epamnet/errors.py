"""Exception hierarchy shared by every epamnet module."""


class EpamError(Exception):
    """Base class; the CLI maps any subclass to exit code 1."""


class DimensionError(EpamError, ValueError):
    pass


class ConfigurationError(EpamError, ValueError):
    pass


class ContractError(EpamError, ValueError):
    pass


class NumericError(EpamError, ArithmeticError):
    pass


class ParseError(EpamError, ValueError):
    pass


class EmptySkeletonError(EpamError, ValueError):
    pass
