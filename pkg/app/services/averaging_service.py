"""
Plain-averaging tomography: sample means of kernel evaluations with their
error bars, normality diagnostics and bootstrap variance.
"""
import logging
from dataclasses import dataclass
from functools import lru_cache
from typing import Any, Callable

import numpy as np
from scipy import stats

from app.core.config import get_settings
from app.core.errors import EfficiencyTooLow, InsufficientData, InvalidInput
from app.core.random import map_chunks, stream
from app.schemas.schemas import DensityMatrixEstimate, Diagnostics, EstimateWithError, SampleSet
from app.services.kernel_service import FockKernelBank

logger = logging.getLogger(__name__)

Evaluator = Callable[[np.ndarray, np.ndarray], Any]


@dataclass
class RunningMoments:
    """Count, mean and centred second moment of rows of real values."""

    count: int
    mean: np.ndarray
    m2: np.ndarray

    @classmethod
    def from_values(cls, values: np.ndarray) -> "RunningMoments":
        values = np.atleast_2d(values)
        mean = values.mean(axis=1)
        m2 = np.sum((values - mean[:, None]) ** 2, axis=1)
        return cls(values.shape[1], mean, m2)

    def merge(self, other: "RunningMoments") -> "RunningMoments":
        """Chan et al. pairwise combination."""
        if other.count == 0:
            return self
        if self.count == 0:
            return other
        total = self.count + other.count
        delta = other.mean - self.mean
        mean = self.mean + delta * (other.count / total)
        m2 = self.m2 + other.m2 + delta ** 2 * (self.count * other.count / total)
        return RunningMoments(total, mean, m2)

    def standard_error(self) -> np.ndarray:
        """sqrt(sum (f - m)^2 / (N (N - 1)))."""
        return np.sqrt(np.maximum(self.m2, 0.0) / (self.count * (self.count - 1)))


def _split_complex(values: np.ndarray) -> np.ndarray:
    """Stack real and imaginary parts as rows."""
    values = np.atleast_2d(np.asarray(values))
    return np.concatenate([values.real, np.imag(values)], axis=0)


def _default_blocks(count: int) -> int:
    blocks = min(get_settings().chi2_default_blocks, count // 30)
    return blocks if blocks >= 10 else 0


def _block_index(start: int, stop: int, count: int, blocks: int) -> np.ndarray:
    return (np.arange(start, stop, dtype=np.int64) * blocks) // count


def _block_sizes(count: int, blocks: int) -> np.ndarray:
    return np.bincount(_block_index(0, count, count, blocks), minlength=blocks)


class AveragingService:
    """Service for Monte-Carlo averaging of tomographic estimators."""

    # ==================== Normality ====================

    def chi2_normality_check(self, evaluations: Any, blocks: int | None = None) -> float:
        """
        Pearson chi-square test of block means (or raw values when blocks is None)
        against a Gaussian with the estimated mean and variance.

        Args:
            evaluations: Real estimator values F_n
            blocks: Number of contiguous blocks (>= 10, each >= 30 values); None = raw-bin mode

        Returns:
            p-value in [0, 1]
        """
        values = np.asarray(evaluations, dtype=float).ravel()
        if blocks is None:
            if values.size < 5 * get_settings().chi2_min_bins:
                raise InsufficientData(f"Datos insuficientes para chi2: N={values.size}")
            return self._gaussian_chi2(values)
        if blocks < 10 or values.size < 30 * blocks:
            raise InsufficientData(
                f"Bloques inválidos para chi2: N={values.size}, bloques={blocks} (>= 10 bloques de >= 30)"
            )
        index = _block_index(0, values.size, values.size, blocks)
        means = np.bincount(index, weights=values, minlength=blocks) / np.bincount(index, minlength=blocks)
        return self._gaussian_chi2(means)

    def _gaussian_chi2(self, values: np.ndarray) -> float:
        scale = values.std(ddof=1)
        if not np.isfinite(scale) or scale == 0:
            return 1.0
        bins = max(get_settings().chi2_min_bins, min(values.size // 5, 50))
        edges = stats.norm.ppf(np.linspace(0.0, 1.0, bins + 1), loc=values.mean(), scale=scale)
        observed = np.bincount(np.searchsorted(edges[1:-1], values, side="right"), minlength=bins)
        expected = np.full(bins, values.size / bins)
        return float(stats.chisquare(observed, expected, ddof=2).pvalue)

    # ==================== Expectation values ====================

    def estimate_expectation(
        self,
        samples: SampleSet,
        evaluator: Evaluator,
        jobs: int | None = None,
    ) -> EstimateWithError:
        """
        Sample mean of evaluator(x, phi) with its error bar.

        Real and imaginary parts are separate estimators; the scalar error bar
        is their root-sum-square.

        Raises:
            InsufficientData: fewer than 2 samples
        """
        count = len(samples)
        if count < 2:
            raise InsufficientData(f"Se requieren al menos 2 muestras (N={count})")
        blocks = _default_blocks(count)

        def work(chunk: int, start: int, stop: int):
            values = np.asarray(evaluator(samples.x[start:stop], samples.phi[start:stop]))
            values = np.broadcast_to(values, (stop - start,))
            rows = _split_complex(values)
            sums = None
            if blocks:
                index = _block_index(start, stop, count, blocks)
                sums = np.bincount(index, weights=rows[0], minlength=blocks)
            return RunningMoments.from_values(rows), sums

        moments, block_sums = self._reduce(map_chunks(work, count, jobs))
        errors = moments.standard_error()
        pvalue = None
        if blocks:
            pvalue = self._gaussian_chi2(block_sums / _block_sizes(count, blocks))
        return EstimateWithError(
            mean=complex(moments.mean[0], moments.mean[1]),
            std_error=float(np.hypot(errors[0], errors[1])),
            std_error_re=float(errors[0]),
            std_error_im=float(errors[1]),
            sample_count=count,
            diagnostics=Diagnostics(chi2_pvalue=pvalue, block_count=blocks),
        )

    def _reduce(self, parts: list) -> tuple[RunningMoments, np.ndarray | None]:
        moments = parts[0][0]
        sums = parts[0][1]
        for part_moments, part_sums in parts[1:]:
            moments = moments.merge(part_moments)
            if sums is not None:
                sums = sums + part_sums
        return moments, sums

    def estimate_operator(
        self,
        samples: SampleSet,
        op_matrix: Any,
        eta: float = 1.0,
        jobs: int | None = None,
    ) -> EstimateWithError:
        """
        <A> for a truncated operator A from the kernel sum_nm A_mn K_nm, the
        Fock expansion of the generic kernel of A.
        """
        A = np.asarray(op_matrix, dtype=complex)
        bank = FockKernelBank.full(A.shape[0], eta)
        weights = np.array([A[m, n] for n, m in bank.pairs])
        mirror = np.array([A[n, m] if n != m else 0.0 for n, m in bank.pairs])

        def evaluator(x: np.ndarray, phi: np.ndarray) -> np.ndarray:
            values = bank.evaluate(x, phi)
            return weights @ values + mirror @ np.conj(values)

        return self.estimate_expectation(samples, evaluator, jobs)

    # ==================== Density matrices ====================

    def reconstruct_density_matrix(
        self,
        samples: SampleSet,
        dim: int,
        eta: float = 1.0,
        hermitize: bool = False,
        jobs: int | None = None,
    ) -> DensityMatrixEstimate:
        """
        Estimate every <n|rho|m>, n <= m < dim, by kernel averaging; the lower
        triangle is the conjugate. With hermitize the raw estimate is projected
        onto the positive trace-one matrices (eigenvalue clipping); off by default.

        Raises:
            EfficiencyTooLow: eta <= 1/2
            InsufficientData: fewer than 100 samples
        """
        if eta <= 0.5:
            raise EfficiencyTooLow(eta)
        count = len(samples)
        if count < 100:
            raise InsufficientData(f"Se requieren al menos 100 muestras (N={count})")
        bank = FockKernelBank.full(dim, eta)
        means, errors, pvalues, blocks = self._average_bank(samples, bank, jobs)

        matrix = np.zeros((dim, dim), dtype=complex)
        error_matrix = np.zeros((dim, dim))
        pvalue_matrix = np.full((dim, dim), np.nan)
        for i, (n, m) in enumerate(bank.pairs):
            matrix[n, m] = means[i]
            matrix[m, n] = np.conj(means[i])
            error_matrix[n, m] = error_matrix[m, n] = errors[i]
            if pvalues is not None:
                pvalue_matrix[n, m] = pvalue_matrix[m, n] = pvalues[i]

        if hermitize:
            matrix = self.project_physical(matrix)

        diagnostics = {
            "block_count": blocks,
            "chi2_pvalue_min": None if pvalues is None else float(np.nanmin(pvalue_matrix)),
        }
        logger.info("[RECONSTRUCT] averaging d=%d eta=%s N=%d", dim, eta, count)
        return DensityMatrixEstimate(
            matrix=matrix,
            errors=error_matrix,
            eta=float(eta),
            N=count,
            hermitized=hermitize,
            method="averaging",
            diagnostics=diagnostics,
        )

    def photon_number_distribution(
        self,
        samples: SampleSet,
        dim: int,
        eta: float = 1.0,
        jobs: int | None = None,
    ) -> tuple[np.ndarray, np.ndarray]:
        """Diagonal <m|rho|m> for m < dim with error bars."""
        if eta <= 0.5:
            raise EfficiencyTooLow(eta)
        if len(samples) < 2:
            raise InsufficientData(f"Se requieren al menos 2 muestras (N={len(samples)})")
        means, errors, _, _ = self._average_bank(samples, FockKernelBank.diagonal(dim, eta), jobs)
        return means.real, errors

    def _average_bank(self, samples: SampleSet, bank: FockKernelBank, jobs: int | None):
        count = len(samples)
        pairs = len(bank.pairs)
        blocks = _default_blocks(count)

        def work(chunk: int, start: int, stop: int):
            values = bank.evaluate(samples.x[start:stop], samples.phi[start:stop])
            rows = _split_complex(values)
            sums = None
            if blocks:
                index = _block_index(start, stop, count, blocks)
                sums = np.stack([np.bincount(index, weights=row, minlength=blocks) for row in rows[:pairs]])
            return RunningMoments.from_values(rows), sums

        moments, block_sums = self._reduce(map_chunks(work, count, jobs))
        errors = moments.standard_error()
        means = moments.mean[:pairs] + 1j * moments.mean[pairs:]
        scalar_errors = np.hypot(errors[:pairs], errors[pairs:])
        pvalues = None
        if blocks:
            sizes = _block_sizes(count, blocks)
            pvalues = np.array([self._gaussian_chi2(row / sizes) for row in block_sums])
        return means, scalar_errors, pvalues, blocks

    def project_physical(self, matrix: np.ndarray) -> np.ndarray:
        """Hermitian part with negative eigenvalues clipped, renormalized to trace one."""
        hermitian = (matrix + matrix.conj().T) / 2
        w, v = np.linalg.eigh(hermitian)
        w = np.clip(w, 0.0, None)
        if w.sum() <= 0:
            raise InvalidInput("La estimación no tiene parte positiva")
        projected = (v * (w / w.sum())) @ v.conj().T
        return (projected + projected.conj().T) / 2

    def suggest_truncation(
        self,
        samples: SampleSet,
        eta: float = 1.0,
        mass: float | None = None,
        dim_max: int = 30,
    ) -> int:
        """
        Smallest d whose reconstructed diagonal (clipped at 0) holds the
        requested mass. Below eta = 1/2 the pre-pass runs without deconvolution.
        """
        mass = mass if mass is not None else get_settings().calibration_mass
        kernel_eta = eta if eta > 0.5 else 1.0
        diagonal, _ = self.photon_number_distribution(samples, dim_max, kernel_eta)
        cumulative = np.cumsum(np.clip(diagonal, 0.0, None))
        reached = np.nonzero(cumulative >= mass * min(1.0, cumulative[-1]))[0]
        dim = int(reached[0]) + 1 if reached.size else dim_max
        dim = max(2, dim)
        logger.info("[RECONSTRUCT] truncation pre-pass chose d=%d (mass %.4f)", dim, mass)
        return dim

    # ==================== Bootstrap ====================

    def bootstrap_std(
        self,
        samples: SampleSet,
        evaluator: Evaluator,
        resamples: int,
        seed: int,
    ) -> float:
        """
        Standard deviation of the means of resamples with replacement.

        Raises:
            InsufficientData: fewer than 20 resamples or 2 samples
        """
        count = len(samples)
        if resamples < 20:
            raise InsufficientData(f"Se requieren al menos 20 remuestreos (M={resamples})")
        if count < 2:
            raise InsufficientData(f"Se requieren al menos 2 muestras (N={count})")
        values = np.broadcast_to(np.asarray(evaluator(samples.x, samples.phi)), (count,))
        means = np.empty(resamples, dtype=complex)
        for b in range(resamples):
            index = stream(seed, "averaging.bootstrap", b).integers(0, count, count)
            means[b] = values[index].mean()
        return float(np.sqrt(np.var(means.real, ddof=1) + np.var(means.imag, ddof=1)))


@lru_cache()
def get_averaging_service() -> AveragingService:
    """Get cached averaging service instance."""
    return AveragingService()
