"""Exception types shared across the package."""


class WPDistillError(Exception):
    """Base class for all package errors."""


class DimensionError(WPDistillError, ValueError):
    pass


class NumericError(WPDistillError, ArithmeticError):
    pass


class ContractError(WPDistillError, ValueError):
    """A caller violated an operation's precondition."""


class ConfigError(WPDistillError, ValueError):
    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class VocabularyError(WPDistillError, ValueError):
    pass


class InputError(WPDistillError, ValueError):
    pass


class LabelError(WPDistillError, ValueError):
    pass


class DegenerateBatchError(WPDistillError, ValueError):
    pass


class UndefinedCorrelationError(WPDistillError, ValueError):
    pass


class TrainingAbort(WPDistillError, RuntimeError):
    def __init__(self, step: int, message: str):
        self.step = step
        super().__init__(f"step {step}: {message}")
