"""Exception hierarchy shared by every subpackage.

The CLI maps these onto process exit codes, so each class carries one.
"""


class DeenError(Exception):
    exit_code = 1


class ConfigError(DeenError, ValueError):
    exit_code = 2


class DimensionError(DeenError, ValueError):
    """Shapes of operands do not line up."""

    exit_code = 2


class ContractError(DeenError, ValueError):
    """A caller broke an operation's precondition."""

    exit_code = 2


class DataError(DeenError):
    exit_code = 3


class ProtocolError(DataError, ValueError):
    """A batch or pool cannot support the requested loss/metric."""


class DegenerateBatchError(DataError, ValueError):
    pass


class NumericError(DeenError, FloatingPointError):
    exit_code = 4
