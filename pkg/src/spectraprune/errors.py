"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes, so every failure a user can trigger
should raise one of them rather than a bare ``ValueError``.
"""

from __future__ import annotations


class SpectraPruneError(Exception):
    """Base class for all package errors."""


class CheckpointFormatError(SpectraPruneError):
    """A checkpoint file does not conform to its declared format."""

    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


class GroupingError(SpectraPruneError):
    """Block grouping rules could not be applied consistently."""


class SpectrumError(SpectraPruneError):
    """A matrix or spectrum cannot be analyzed."""


class DegenerateSpectrumError(SpectrumError):
    """Too few distinct positive eigenvalues to place a fit threshold."""


class DegenerateTailError(SpectrumError):
    """The tail sum in the Hill estimator vanishes."""


class ZeroReferenceError(SpectrumError):
    """The Hill reference eigenvalue is zero."""


class AllocationError(SpectraPruneError):
    """Invalid arguments to an allocation routine."""


class InfeasibleBudgetError(AllocationError):
    """The requested global budget cannot be met under the constraints."""


class PlanError(SpectraPruneError):
    """A plan does not match the store it is applied to."""
