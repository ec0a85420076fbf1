"""Exception types shared across the package."""

from __future__ import annotations


class QuifsError(Exception):
    """Base class for all package-specific errors."""


class KernelError(QuifsError):
    """Unknown kernel name, unsupported dimension, or missing transform."""


class IncompleteFieldError(QuifsError):
    """A stencil reached a lattice point with no stored value.

    This signals that the Lipschitz extension step was skipped or did not
    cover the query region.
    """


class BudgetInfeasibleError(QuifsError):
    """No shape parameter on the ladder meets the saturation target."""


class EstimationError(QuifsError):
    """The sample net is too degenerate to estimate a Lipschitz rank."""


class EmptyNetError(QuifsError):
    """An operation that needs feasible samples received none."""


class SynthesisError(QuifsError):
    """Pipeline-level failure (e.g. too many non-converged solves)."""


class ConfigError(QuifsError):
    """Malformed problem configuration; carries the offending field path."""

    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}")


class TableFormatError(QuifsError):
    """Corrupt, truncated, or version-skewed policy table file."""
