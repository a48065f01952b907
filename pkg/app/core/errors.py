"""
Error hierarchy. Every error carries the process exit code the CLI returns
for it, the same way HTTP errors carry a status code.
"""
from typing import Any


class HomtomError(Exception):
    """Base error with an exit code and a human-readable detail."""

    exit_code: int = 1

    def __init__(self, detail: str):
        super().__init__(detail)
        self.detail = detail


# ==================== Validation (exit 2) ====================

class InvalidInput(HomtomError):
    """Input outside the domain of an operation."""

    exit_code = 2


class TruncationError(InvalidInput):
    """Fock truncation loses more trace than allowed."""


class EfficiencyTooLow(InvalidInput):
    """Deconvolution requested at eta <= 1/2."""

    def __init__(self, eta: float):
        super().__init__(f"Eficiencia demasiado baja para deconvolución: eta={eta} (se requiere eta > 0.5)")
        self.eta = eta


class DomainError(InvalidInput):
    """Argument outside the supported domain of a special function."""


class InsufficientData(InvalidInput):
    """Too few samples for the requested statistic."""


class SingularBasis(InvalidInput):
    """Null-estimator Gram matrix cannot be repaired by the ridge."""


class EmptyOutcomeBin(InvalidInput):
    """No joint records for a requested detector outcome."""

    def __init__(self, n: int):
        super().__init__(f"No hay registros para el resultado n={n}")
        self.n = n


class FockIndexError(InvalidInput, IndexError):
    """Negative Fock index."""


# ==================== Numerical (exit 3) ====================

class NumericalFailure(HomtomError):
    """Numerical procedure failed to reach its tolerance."""

    exit_code = 3


class NotConverged(NumericalFailure):
    """Iterative optimizer stopped at max_iters; the partial report is attached."""

    def __init__(self, detail: str, report: Any = None, result: Any = None):
        super().__init__(detail)
        self.report = report
        self.result = result


class ConvergenceError(NumericalFailure):
    """Series or adaptive quadrature failed to reach tolerance."""


class NumericalError(NumericalFailure):
    """Quantity not computable to the required accuracy."""


# ==================== I/O (exit 4) ====================

class FileFormatError(HomtomError):
    """Malformed input file."""

    exit_code = 4

    def __init__(self, detail: str, validations: list | None = None):
        super().__init__(detail)
        self.validations = validations or []
