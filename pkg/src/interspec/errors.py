"""Exception types shared across the package.

The CLI maps the three families below onto distinct exit codes.
"""


class InterspecError(Exception):
    """Base class for every error raised by this package."""


# -- configuration / contract family (exit code 2)
class ConfigError(InterspecError, ValueError):
    pass


class ContractError(InterspecError, ValueError):
    """An argument violates a documented precondition."""


class ShapeError(ContractError):
    pass


class DomainError(ContractError):
    pass


class SplitError(ContractError):
    pass


# -- ingestion / file family (exit code 3)
class IngestionError(InterspecError):
    pass


class ParseError(IngestionError, ValueError):
    def __init__(self, message, row=None):
        super().__init__(message if row is None else f"row {row}: {message}")
        self.row = row


class CoverageError(IngestionError, ValueError):
    pass


class ChecksumError(IngestionError):
    pass


class VersionError(IngestionError):
    pass


class CheckpointError(IngestionError):
    pass


# -- numeric family (exit code 4)
class NumericError(InterspecError, ArithmeticError):
    pass


class SingularityError(NumericError):
    pass


class DivergenceError(NumericError):
    pass


class InfeasibleError(NumericError):
    pass


class DegenerateChannelError(NumericError):
    pass


class RankError(NumericError):
    pass


class UndefinedCorrelationError(NumericError):
    pass
