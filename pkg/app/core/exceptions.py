"""Domain errors raised by the services.

Routes translate these into ``HTTPException`` and the CLI into exit code 2.
Report-style operations (grid validation, experiment rows) never raise them
for domain failures; they return structured records instead.
"""
from typing import Any, Optional, Tuple


class HomogenizationError(Exception):
    """Base class for every error raised by the library."""

    status_code: int = 400

    def __init__(self, message: str):
        super().__init__(message)
        self.message = message


class InvalidInputError(HomogenizationError):
    pass


class PaddingError(HomogenizationError):
    """The cloud window does not contain the required enlargement of a region."""


class GeometryError(HomogenizationError):
    pass


class SolverError(HomogenizationError):
    """Conjugate gradients did not reach the tolerance.

    Carries the best iterate so callers can still inspect it.
    """

    status_code = 422

    def __init__(self, message: str, best_iterate: Any = None,
                 residual: float = float("nan"), iterations: int = 0):
        super().__init__(message)
        self.best_iterate = best_iterate
        self.residual = residual
        self.iterations = iterations


class PathConstructionError(HomogenizationError):
    status_code = 422

    def __init__(self, message: str, rect: Any = None, point_id: Optional[int] = None):
        super().__init__(message)
        self.rect = rect
        self.point_id = point_id


class StitchingError(HomogenizationError):
    status_code = 422

    def __init__(self, message: str, square: Tuple[int, int]):
        super().__init__(f"square {square}: {message}")
        self.square = square


class SchemaMismatchError(HomogenizationError):
    pass
