"""Exception types shared across the toolkit."""


class ContractError(ValueError):
    """Dimension or precondition mismatch between caller and callee."""


class InputError(ValueError):
    """Non-finite or otherwise malformed numerical input."""


class ConfigError(ValueError):
    """Invalid experiment or model configuration."""


class IntegrationError(RuntimeError):
    """The integrator produced a non-finite state."""

    def __init__(self, message, stage=None):
        super().__init__(message)
        self.stage = stage


class SingularMetricError(ArithmeticError):
    """A metric matrix is too close to singular to invert."""


class StaleTapeError(RuntimeError):
    """A gradient tape was reused or belongs to an outdated parameter set."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss component."""

    def __init__(self, component, iteration=None):
        super().__init__(f"non-finite loss component {component!r} at iteration {iteration}")
        self.component = component
        self.iteration = iteration


class CheckpointError(IOError):
    """Checkpoint file is malformed or has an unsupported version."""
