"""Shared error taxonomy.

Validation problems (shapes, domains, formats, config) are ValueError
subclasses; numerical blowups get their own branch so callers and the CLI
can map them to a distinct exit code.
"""


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class DomainError(ValueError):
    """Operand values lie outside an op's mathematical domain."""


class ConfigError(ValueError):
    """Malformed or unknown configuration input."""


class DatasetError(ValueError):
    """Malformed dataset file or incompatible dataset contents."""


class CheckpointError(ValueError):
    """Malformed checkpoint file or incompatible checkpoint contents."""


class NonFiniteError(ArithmeticError):
    """An op produced NaN or infinity in a forward or backward value."""
