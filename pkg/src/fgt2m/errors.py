"""Exception types shared across the package."""


class FgT2MError(Exception):
    pass


class ParameterError(FgT2MError, ValueError):
    """Invalid numeric parameter (schedule bounds, widths, ...)."""


class ContractError(FgT2MError, ValueError):
    """Shapes or arguments violate an operation's precondition."""


class ConfigurationError(FgT2MError, ValueError):
    pass


class NumericDivergenceError(FgT2MError, ArithmeticError):
    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class MalformedParseError(FgT2MError, ValueError):
    """Dependency heads do not form a single-rooted tree."""


class FormatError(FgT2MError, ValueError):
    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class UnparseableCaptionError(FgT2MError, ValueError):
    pass


class InputError(FgT2MError, ValueError):
    pass


class StatsError(FgT2MError, ValueError):
    pass


class TrainingFailure(FgT2MError, RuntimeError):
    pass
