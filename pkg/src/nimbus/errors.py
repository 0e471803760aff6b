"""Shared exception types."""


class DomainError(ValueError):
    """An argument is outside the mathematical domain of an operation."""


class ConfigError(ValueError):
    """A configuration is missing, inconsistent, or has unknown keys."""


class FormatError(ValueError):
    """A binary file does not match its declared format.

    Carries the byte offset at which decoding failed.
    """

    def __init__(self, message, offset):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class StateError(RuntimeError):
    """Streaming state was used inconsistently (e.g. cache shape drift)."""


class RolloutError(RuntimeError):
    """An autoregressive rollout hit non-finite values.

    Carries the forecast step index at which the abort happened.
    """

    def __init__(self, message, step):
        super().__init__(f"{message} (forecast step {step})")
        self.step = step
