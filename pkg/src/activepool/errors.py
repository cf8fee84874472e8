"""Error taxonomy shared across the engine.

Exit-code mapping used by the CLI: configuration problems exit 2,
numeric failures exit 3.
"""


class ConfigurationError(ValueError):
    """A config value is out of range or inconsistent with the dataset."""


class ContractViolation(ValueError):
    """A caller broke an operation precondition (bad index, empty batch, ...)."""


class NumericFailure(ArithmeticError):
    """Non-finite values appeared during computation.

    ``context`` carries whatever locates the failure (batch index,
    epoch/iteration, ...).
    """

    def __init__(self, message: str, **context):
        super().__init__(message)
        self.context = dict(context)

    def __str__(self) -> str:
        base = super().__str__()
        if self.context:
            detail = ", ".join(f"{k}={v}" for k, v in sorted(self.context.items()))
            return f"{base} ({detail})"
        return base
