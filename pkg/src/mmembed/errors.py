"""Exception types shared across the package.

The CLI maps these onto process exit codes (see ``mmembed.cli``).
"""


class MMEmbedError(Exception):
    """Base class for all package errors."""


class InputError(MMEmbedError, ValueError):
    """Malformed sequence, plan, batch or file content."""


class ConfigError(MMEmbedError, ValueError):
    """Invalid or inconsistent configuration."""


class MaskError(MMEmbedError):
    """A sequence has nothing that can be masked."""


class GenerationError(MMEmbedError):
    """The synthetic corpus cannot be generated as requested."""


class EvaluationError(MMEmbedError):
    """Inconsistent retrieval judgments or rankings."""


class NumericError(MMEmbedError, ArithmeticError):
    """Non-finite value encountered during forward, loss or gradient computation."""

    def __init__(self, message: str, layer: int | None = None, sequence_id: str | None = None):
        super().__init__(message)
        self.layer = layer
        self.sequence_id = sequence_id
