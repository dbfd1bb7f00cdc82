"""Error taxonomy for the package.

Every failure mode raised by the library is a subclass of :class:`LmdropError`
so callers can catch package errors without masking programming mistakes.
"""


class LmdropError(Exception):
    """Base class for all errors raised by this package."""


# ---------------------------------------------------------------------------
# data loading / validation

class SchemaError(LmdropError):
    """Input file or config does not match the declared schema."""


class GapError(SchemaError):
    """A subject's occasions are not exactly 1..t_i (gap or duplicate)."""


class DomainError(SchemaError):
    """A value lies outside its declared domain (non-binary, non-finite, ...)."""


# ---------------------------------------------------------------------------
# model / numerics

class ShapeError(LmdropError):
    """Array dimensions inconsistent with the model specification."""


class NumericalError(LmdropError):
    """A non-finite quantity appeared where a finite one is required."""

    def __init__(self, message: str, subject_id: str | None = None):
        if subject_id is not None:
            message = f"{message} (subject {subject_id!r})"
        super().__init__(message)
        self.subject_id = subject_id


class ExplosionError(LmdropError):
    """Brute-force enumeration would exceed the configured path budget."""


# ---------------------------------------------------------------------------
# estimation

class RankError(LmdropError):
    """Rank-deficient design in a weighted least-squares subproblem."""

    def __init__(self, message: str, columns: tuple[str, ...] = ()):
        super().__init__(message)
        self.columns = columns


class SeparationError(LmdropError):
    """A logistic subproblem diverged (e.g. perfect separation, no events)."""


class DegenerateStateError(LmdropError):
    """A latent state has (numerically) zero expected occupancy."""

    def __init__(self, message: str, state: int | None = None):
        super().__init__(message)
        self.state = state


class MonotonicityError(LmdropError):
    """The EM log-likelihood decreased beyond tolerance; indicates a bug."""


class FitError(LmdropError):
    """No start of the optimisation produced a usable fit."""


# ---------------------------------------------------------------------------
# inference

class SingularInformationError(LmdropError):
    """Observed information is not positive definite; SEs are unavailable.

    The assembled matrix is attached as ``result`` so callers can still
    persist it alongside the fit.
    """

    def __init__(self, message: str, result=None):
        super().__init__(message)
        self.result = result


class NestingViolationError(LmdropError):
    """A constrained fit beat its unconstrained counterpart beyond tolerance."""
