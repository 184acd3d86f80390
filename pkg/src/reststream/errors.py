"""Exception hierarchy shared across the package.

Every error carries a short machine-readable ``category`` so the CLI can emit
one-line diagnostics of the form ``error: <category>: <detail>``.
"""

from __future__ import annotations


class RestError(Exception):
    """Base class for all package errors."""

    category = "error"


class FormatError(RestError):
    """A file does not follow one of the binary or CSV formats."""

    category = "format"


class ValidationError(RestError):
    """An input value, shape, or configuration violates a contract."""

    category = "validation"


class DivergenceError(RestError):
    """A forward pass or training run left the finite range."""

    category = "diverged"

    def __init__(self, message: str, time_step: int | None = None,
                 iteration: int | None = None):
        self.time_step = time_step
        self.iteration = iteration
        super().__init__(message)

    @classmethod
    def at_step(cls, time_step: int, iteration: int,
                epoch: int | None = None) -> "DivergenceError":
        where = f"time step {time_step}, update {iteration}"
        if epoch is not None:
            where += f", epoch {epoch}"
        return cls(f"non-finite state at {where}", time_step, iteration)
