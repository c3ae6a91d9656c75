"""Exception hierarchy shared by every msdakit module."""

from __future__ import annotations


class MsdaError(Exception):
    """Base class for all library errors."""


class SizeError(MsdaError, ValueError):
    """A tensor extent is zero, negative, or too large to allocate."""


class ShapeError(MsdaError, ValueError):
    """Operand shapes disagree with each other or with the config."""

    def __init__(self, message: str, axis: str | None = None):
        super().__init__(message)
        self.axis = axis


class InputError(MsdaError, ValueError):
    """An argument value is invalid (non-finite, out of range, ...)."""


class PlanError(MsdaError, ValueError):
    """No kernel plan satisfies the requested tile budget."""


class FormatError(MsdaError, ValueError):
    """A serialized tensor is malformed."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset
