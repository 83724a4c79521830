"""Exception types shared across the package.

The CLI maps these onto process exit codes: usage and configuration
problems exit 1, data problems exit 2, numeric failures exit 3.
"""

from __future__ import annotations


class ContractError(ValueError):
    """A caller violated an operation contract (shapes, ranges, arguments)."""


class ConfigError(ValueError):
    """An unknown layer kind, rule name, or inconsistent configuration."""


class DataFormatError(ValueError):
    """A dataset or checkpoint file is malformed.

    ``offset`` holds the byte offset at which parsing failed, when known.
    """

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NumericError(ArithmeticError):
    """A numeric invariant broke: non-finite values, degenerate embeddings."""
