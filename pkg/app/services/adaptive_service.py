"""
Adaptive tomography: variance reduction by adding a least-squares
combination of null estimators x^k e^{+-i(k+2+2n)phi} to a kernel.
"""
import logging
from functools import lru_cache
from typing import Any, Callable, Literal

import numpy as np

from app.core.config import get_settings
from app.core.errors import InsufficientData, InvalidInput, SingularBasis
from app.core.random import map_chunks
from app.schemas.schemas import CoefficientEntry, CoefficientReport, EstimateWithError, NullBasis, NullTerm, SampleSet
from app.services.averaging_service import get_averaging_service

logger = logging.getLogger(__name__)

FitMode = Literal["split", "whole"]


def null_value(term: NullTerm, x: Any, phi: Any) -> Any:
    """x^k e^{sign i (k + 2 + 2n) phi}."""
    value = np.power(x, term.k) * np.exp(1j * term.sign * term.frequency * np.asarray(phi, dtype=float))
    return complex(value) if np.ndim(value) == 0 else value


def null_matrix(basis: NullBasis, x: np.ndarray, phi: np.ndarray) -> np.ndarray:
    """All basis terms on the samples, shape (len(basis), N)."""
    x = np.asarray(x, dtype=float)
    phi = np.asarray(phi, dtype=float)
    out = np.empty((len(basis), x.size), dtype=complex)
    for t, term in enumerate(basis.terms):
        out[t] = null_value(term, x, phi)
    return out


class AdaptedKernel:
    """Base kernel plus sum_t c_t N_t."""

    def __init__(self, base: Callable, basis: NullBasis, coefficients: np.ndarray):
        self.base = base
        self.basis = basis
        self.coefficients = np.asarray(coefficients, dtype=complex)

    def __call__(self, x: Any, phi: Any) -> Any:
        values = np.asarray(self.base(x, phi), dtype=complex)
        if len(self.basis) == 0:
            return values
        x_arr = np.atleast_1d(np.asarray(x, dtype=float))
        phi_arr = np.broadcast_to(np.asarray(phi, dtype=float), x_arr.shape)
        correction = self.coefficients @ null_matrix(self.basis, x_arr, phi_arr)
        return values + correction.reshape(values.shape)


class AdaptiveService:
    """Service for fitting and applying null-estimator corrections."""

    def default_basis(self) -> NullBasis:
        settings = get_settings()
        return NullBasis.build(settings.adaptive_max_k, settings.adaptive_max_n, both_signs=True)

    # ==================== Fitting ====================

    def adapt(
        self,
        samples: SampleSet,
        base_kernel: Callable,
        basis: NullBasis,
        jobs: int | None = None,
    ) -> tuple[AdaptedKernel, CoefficientReport]:
        """
        Minimize the in-sample variance of f + sum_t c_t N_t over complex c.

        Normal equations on centred values with a ridge of 1e-10 times the
        mean Gram diagonal.

        Raises:
            InsufficientData: N < 10 |basis|
            SingularBasis: Gram matrix unusable after the ridge
        """
        count = len(samples)
        size = len(basis)
        if count < max(2, 10 * size):
            raise InsufficientData(f"Se requieren al menos {max(2, 10 * size)} muestras (N={count})")

        def first_pass(chunk: int, start: int, stop: int):
            x, phi = samples.x[start:stop], samples.phi[start:stop]
            f = np.broadcast_to(np.asarray(base_kernel(x, phi), dtype=complex), x.shape)
            return f.sum(), null_matrix(basis, x, phi).sum(axis=1)

        parts = map_chunks(first_pass, count, jobs)
        f_mean = sum(p[0] for p in parts) / count
        n_mean = sum(p[1] for p in parts) / count

        def second_pass(chunk: int, start: int, stop: int):
            x, phi = samples.x[start:stop], samples.phi[start:stop]
            f = np.broadcast_to(np.asarray(base_kernel(x, phi), dtype=complex), x.shape) - f_mean
            A = null_matrix(basis, x, phi) - n_mean[:, None]
            return A.conj() @ A.T, A.conj() @ f, float(np.vdot(f, f).real)

        parts = map_chunks(second_pass, count, jobs)
        gram = sum(p[0] for p in parts)
        cross = sum(p[1] for p in parts)
        base_ss = sum(p[2] for p in parts)
        variance_base = base_ss / (count - 1)

        if size == 0:
            report = CoefficientReport(fit_count=count, variance_base=variance_base, variance_adapted=variance_base)
            return AdaptedKernel(base_kernel, basis, np.zeros(0, dtype=complex)), report

        coefficients = self._solve(gram, cross)
        adapted_ss = base_ss + 2 * float(np.vdot(coefficients, cross).real) + float(
            np.vdot(coefficients, gram @ coefficients).real
        )
        variance_adapted = max(adapted_ss, 0.0) / (count - 1)
        logger.debug("[ADAPTIVE] %d terms, variance %.4e -> %.4e", size, variance_base, variance_adapted)

        report = CoefficientReport(
            coefficients=[
                CoefficientEntry(k=t.k, n=t.n, sign=t.sign, c=complex(c))
                for t, c in zip(basis.terms, coefficients)
            ],
            fit_count=count,
            variance_base=variance_base,
            variance_adapted=variance_adapted,
        )
        return AdaptedKernel(base_kernel, basis, coefficients), report

    def _solve(self, gram: np.ndarray, cross: np.ndarray) -> np.ndarray:
        scale = float(np.mean(np.diag(gram).real))
        if not np.isfinite(scale) or scale <= 0:
            raise SingularBasis("Matriz de Gram nula o no finita")
        ridge = get_settings().adaptive_ridge * scale
        try:
            coefficients = -np.linalg.solve(gram + ridge * np.eye(gram.shape[0]), cross)
        except np.linalg.LinAlgError as e:
            raise SingularBasis(f"Matriz de Gram singular: {e}") from e
        if not np.all(np.isfinite(coefficients)):
            raise SingularBasis("Coeficientes no finitos")
        return coefficients

    # ==================== Estimation ====================

    def estimate_adaptive(
        self,
        samples: SampleSet,
        base_kernel: Callable,
        basis: NullBasis | None = None,
        mode: FitMode = "split",
        jobs: int | None = None,
    ) -> tuple[EstimateWithError, CoefficientReport]:
        """
        Adapted estimate of the base kernel's mean.

        split (default): fit on even-indexed samples, average on odd-indexed ones.
        whole: fit and average on the full set.
        """
        basis = basis if basis is not None else self.default_basis()
        if mode == "split":
            fit_set = samples.subset(slice(0, None, 2))
            eval_set = samples.subset(slice(1, None, 2))
        elif mode == "whole":
            fit_set = eval_set = samples
        else:
            raise InvalidInput(f"Modo de ajuste desconocido: {mode}")

        kernel, report = self.adapt(fit_set, base_kernel, basis, jobs)
        report.mode = mode
        estimate = get_averaging_service().estimate_expectation(eval_set, kernel, jobs)
        logger.info(
            "[ADAPTIVE] mode=%s fit=%d eval=%d terms=%d",
            mode, len(fit_set), len(eval_set), len(basis),
        )
        return estimate, report


@lru_cache()
def get_adaptive_service() -> AdaptiveService:
    """Get cached adaptive service instance."""
    return AdaptiveService()
