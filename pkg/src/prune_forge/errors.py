"""Exception types shared across the package."""


class PruneForgeError(Exception):
    pass


class DimensionError(PruneForgeError, ValueError):
    """Operand shapes are incompatible."""


class ParameterError(PruneForgeError, ValueError):
    """A scalar argument is out of its valid range."""


class ContractError(PruneForgeError, RuntimeError):
    """An API precondition was violated (stale cache, frozen masks, ...)."""


class ConfigError(PruneForgeError, ValueError):
    pass


class DivergenceError(PruneForgeError, FloatingPointError):
    def __init__(self, step, loss):
        super().__init__(f"non-finite loss {loss!r} at step {step}")
        self.step = step
        self.loss = loss
