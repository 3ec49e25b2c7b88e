"""Exception types shared across the package."""


class ContractViolation(ValueError):
    """A documented precondition of an operation was not met."""


class ConfigError(ValueError):
    """Invalid or unknown configuration value."""


class SchemaError(ConfigError):
    """Tabular inputs do not share the expected columns."""


class NumericError(ArithmeticError):
    """A computation produced non-finite values."""


class DivergedTrajectoryError(NumericError):
    """A reverse-time integration left the finite range.

    ``step`` is the integration step at which the state became non-finite and
    ``index`` (when known) is the position of the offending trajectory in the
    batch or pool.
    """

    def __init__(self, message, step=None, index=None):
        super().__init__(message)
        self.step = step
        self.index = index


class SupportMismatchError(NumericError):
    """Target measure puts mass where the model marginal vanishes."""


class UnsupportedOpError(TypeError):
    """An operation without a registered reverse-mode rule touched the tape."""
