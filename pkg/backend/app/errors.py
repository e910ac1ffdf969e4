# backend/app/errors.py
from typing import Iterable, Optional, Sequence


class SlicedInferenceError(Exception):
    """Root of all domain errors. ``stage`` names the pipeline step that failed."""

    def __init__(self, message: str, *, stage: Optional[str] = None) -> None:
        super().__init__(message)
        self.stage = stage or "unknown"


class InvalidInputError(SlicedInferenceError, ValueError):
    pass


class DimensionMismatchError(InvalidInputError):
    pass


class SingularStandardizationError(SlicedInferenceError, ValueError):
    def __init__(self, columns: Sequence[str], *, smallest_eigenvalue: float) -> None:
        self.columns = list(columns)
        self.smallest_eigenvalue = smallest_eigenvalue
        names = ", ".join(self.columns) if self.columns else "<unidentified>"
        super().__init__(
            f"sample covariance is not positive definite "
            f"(smallest eigenvalue {smallest_eigenvalue:.3e}); offending columns: {names}",
            stage="standardize",
        )


class NonFiniteResultError(SlicedInferenceError):
    pass


class UsageError(SlicedInferenceError):
    def __init__(self, message: str, *, suggestions: Iterable[str] = ()) -> None:
        self.suggestions = list(suggestions)
        if self.suggestions:
            message = f"{message} (did you mean: {', '.join(self.suggestions)}?)"
        super().__init__(message, stage="usage")
