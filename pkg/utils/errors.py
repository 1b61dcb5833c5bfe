from __future__ import annotations


class GoldError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(GoldError, ValueError):
    pass


class NumericalError(GoldError):
    pass


class OrthonormalityError(GoldError, ValueError):
    pass


class DegenerateSpectrumError(NumericalError):
    pass


class DataError(GoldError, ValueError):
    pass


class DivergenceError(NumericalError):
    pass


class ProbabilityError(GoldError, ValueError):
    pass


class EmptyMaskError(GoldError):
    pass


class DegenerateError(GoldError, ValueError):
    pass


class ConfigError(GoldError, ValueError):
    pass


class ParseError(GoldError, ValueError):
    def __init__(self, message: str, line: int | None = None) -> None:
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ContractError(GoldError):
    pass


class FrozenContractError(ContractError):
    pass


class SourceAccessError(ContractError):
    pass


class QuarantineError(ContractError):
    pass


class EngineError(GoldError):
    def __init__(self, batch_index: int, cause: BaseException) -> None:
        super().__init__(f"batch {batch_index}: {cause}")
        self.batch_index = batch_index
        self.cause = cause
