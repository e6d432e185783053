"""Exception types shared across the package."""


class PotguiError(Exception):
    """Base class for all errors raised by this package."""


class InvalidInputError(PotguiError, ValueError):
    pass


class DivergenceError(PotguiError, FloatingPointError):
    """A non-finite value appeared inside the logit unroll."""

    def __init__(self, layer, batch=None):
        self.layer = layer
        self.batch = batch
        where = f"layer {layer}"
        if batch is not None:
            where = f"batch {batch}, {where}"
        super().__init__(f"non-finite logits at {where}")


class ContractError(PotguiError, RuntimeError):
    """An operation was called without the state it depends on."""


class FormatError(PotguiError, ValueError):
    def __init__(self, message, offset):
        self.offset = offset
        super().__init__(f"{message} (at byte {offset})")


class UnsupportedVersionError(FormatError):
    pass


class SchemaError(PotguiError, ValueError):
    """Checkpoint and dataset disagree on a shape."""
