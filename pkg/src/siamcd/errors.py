"""Exception hierarchy.

Each class maps onto one CLI exit code (see ``siamcd.cli``).
"""


class SiamCDError(Exception):
    exit_code = 4


class ConfigurationError(SiamCDError, ValueError):
    exit_code = 2


class ShapeError(SiamCDError, ValueError):
    exit_code = 4


class ContractError(SiamCDError, ValueError):
    """An operation was asked for an output the network variant does not produce."""

    exit_code = 4


class DomainError(SiamCDError, ValueError):
    exit_code = 4


class ValidationError(SiamCDError, ValueError):
    exit_code = 3


class SamplingError(SiamCDError, ValueError):
    exit_code = 3


class ParseError(SiamCDError, ValueError):
    exit_code = 3


class CheckpointError(SiamCDError, IOError):
    exit_code = 4


class NumericalError(SiamCDError, FloatingPointError):
    exit_code = 4
