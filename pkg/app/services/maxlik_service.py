"""
Maximum-likelihood reconstruction of a truncated density matrix from
homodyne data.

The detector loss sits in the forward model: each datum (phi, x) contributes
the operator M = sqrt(eta) sum_k A_k^dag v v^dag A_k with v_m = e^{i m phi}
psi_m(sqrt(eta) x), so p(x, phi) = Tr[rho M]. No efficiency bound applies.
"""
import logging
import math
from functools import lru_cache
from typing import Any, Callable

import numpy as np
from scipy import linalg, optimize
from scipy.integrate import trapezoid

from app.core.errors import InsufficientData, InvalidInput, NotConverged, NumericalError
from app.core.random import map_chunks, stream
from app.schemas.schemas import (
    CholeskyFactor,
    DensityMatrixEstimate,
    MLConfig,
    MLOptimizer,
    MLReport,
    SampleSet,
)
from app.services.state_service import fock_wavefunctions, loss_kraus_operators

logger = logging.getLogger(__name__)

DENSITY_FLOOR = 1e-300
RESIDUAL_FACTOR = 10.0
MIN_DILUTION = 1e-10
RESIDUAL_X_BINS = 200
RESIDUAL_NODES = 8
SUPPORT_FLOOR = 1e-10

Callback = Callable[[int, float], None]


# ==================== Cholesky parameterization ====================

def density_from_cholesky(T: CholeskyFactor) -> np.ndarray:
    """rho = T^dag T / Tr[T^dag T]."""
    product = T.T.conj().T @ T.T
    trace = np.trace(product).real
    if trace <= 0:
        raise InvalidInput("Factor de Cholesky nulo")
    rho = product / trace
    return (rho + rho.conj().T) / 2


def cholesky_from_density(rho: np.ndarray) -> CholeskyFactor:
    """Upper triangular T with real nonnegative diagonal and T^dag T = rho."""
    rho = np.asarray(rho, dtype=complex)
    w, v = np.linalg.eigh((rho + rho.conj().T) / 2)
    root = np.sqrt(np.clip(w, 0.0, None))[:, None] * v.conj().T
    upper = linalg.qr(root, mode="r")[0]
    diag = np.diag(upper)
    phases = np.exp(1j * np.angle(diag))
    T = np.triu(phases.conj()[:, None] * upper)
    T[np.diag_indices_from(T)] = np.abs(diag)
    return CholeskyFactor(dim=T.shape[0], T=T)


def cholesky_from_params(params: np.ndarray, dim: int) -> CholeskyFactor:
    """d real diagonal entries (absolute value taken) then d(d-1)/2 complex entries."""
    params = np.asarray(params, dtype=float)
    if params.size != dim * dim:
        raise InvalidInput(f"Se esperaban {dim * dim} parámetros, hay {params.size}")
    T = np.zeros((dim, dim), dtype=complex)
    T[np.diag_indices(dim)] = np.abs(params[:dim])
    rows, cols = np.triu_indices(dim, 1)
    half = rows.size
    T[rows, cols] = params[dim:dim + half] + 1j * params[dim + half:]
    return CholeskyFactor(dim=dim, T=T)


def params_from_cholesky(T: CholeskyFactor) -> np.ndarray:
    rows, cols = np.triu_indices(T.dim, 1)
    upper = T.T[rows, cols]
    return np.concatenate([np.diag(T.T).real, upper.real, upper.imag])


def project_to_simplex(values: np.ndarray) -> np.ndarray:
    """Euclidean projection of a real vector onto {p >= 0, sum p = 1} (sort method)."""
    u = np.sort(values)[::-1]
    partial = (np.cumsum(u) - 1.0) / np.arange(1, values.size + 1)
    k = np.nonzero(partial < u)[0][-1]
    return np.maximum(values - partial[k], 0.0)


def project_density(matrix: np.ndarray) -> np.ndarray:
    """Closest density matrix in Frobenius norm: eigenvalues projected onto the simplex."""
    w, v = np.linalg.eigh((matrix + matrix.conj().T) / 2)
    projected = (v * project_to_simplex(w)) @ v.conj().T
    return (projected + projected.conj().T) / 2


# ==================== Likelihood model ====================

class LikelihoodModel:
    """Per-datum operators M_i flattened to rows, p_i = Re(M_i . rho^T)."""

    def __init__(self, operators: np.ndarray, dim: int, eta: float):
        self.operators = operators
        self.dim = dim
        self.eta = eta

    @classmethod
    def build(cls, samples: SampleSet, dim: int, eta: float, jobs: int | None = None) -> "LikelihoodModel":
        scale = math.sqrt(eta)
        kraus = np.stack(loss_kraus_operators(float(eta), dim))
        levels = np.arange(dim)

        def work(chunk: int, start: int, stop: int) -> np.ndarray:
            x, phi = samples.x[start:stop], samples.phi[start:stop]
            v = fock_wavefunctions(dim - 1, scale * x) * np.exp(1j * np.outer(levels, phi))
            w = np.einsum("kab,ai->kbi", kraus, v)
            M = scale * np.einsum("kai,kbi->iab", w, w.conj())
            return M.reshape(stop - start, dim * dim)

        return cls(np.concatenate(map_chunks(work, len(samples), jobs)), dim, eta)

    def __len__(self) -> int:
        return int(self.operators.shape[0])

    def take(self, index: np.ndarray) -> "LikelihoodModel":
        return LikelihoodModel(self.operators[index], self.dim, self.eta)

    def probabilities(self, rho: np.ndarray) -> np.ndarray:
        p = (self.operators @ rho.T.ravel()).real
        return np.maximum(p, DENSITY_FLOOR)

    def loglik(self, rho: np.ndarray) -> float:
        return float(np.sum(np.log(self.probabilities(rho))))

    def gradient_operator(self, rho: np.ndarray) -> np.ndarray:
        """R = (1/N) sum_i M_i / p_i."""
        weights = 1.0 / self.probabilities(rho)
        R = (weights @ self.operators).reshape(self.dim, self.dim) / len(self)
        return (R + R.conj().T) / 2

    def stationarity_residual(self, rho: np.ndarray) -> float:
        """
        KKT residual of the likelihood at rho, on the exact densities.

        Returns max_j lambda_j |<j|R|j> - 1| over eigenvectors of rho, together
        with any excess <j|R|j> - 1 > 0 (an ascent direction off the support).
        Directions with lambda_j = 0 and <j|R|j> <= 1 count as stationary, so
        a rank-deficient maximum scores zero. The quadrature outcomes are not
        binned: the data enter through the same operators M_i the likelihood
        uses.
        """
        w, v = np.linalg.eigh(rho)
        r = np.einsum("aj,ab,bj->j", v.conj(), self.gradient_operator(rho), v).real
        weighted = np.max(np.clip(w, 0.0, None) * np.abs(r - 1.0))
        excess = np.max(np.clip(r - 1.0, 0.0, None))
        return float(max(weighted, excess))


def binned_stationarity_residual(
    rho: np.ndarray,
    samples: SampleSet,
    eta: float,
    x_bins: int = RESIDUAL_X_BINS,
    phase_bins: int | None = None,
) -> float:
    """
    Stationarity residual with the quadrature outcomes discretized.

    Phases fall into `phase_bins` equal cells of [0, pi) (8d by default) and x
    into `x_bins` equal cells spanning the data. Each datum is replaced by the
    POVM element Pi of its cell, M(x, phi) integrated over the x cell and
    averaged over the phase cell. With R = (1/N) sum_i Pi_i / Tr[rho Pi_i],
    returns max |<j|R|j> - 1| over the eigenvectors j in the support of rho.

    Args:
        rho: Density matrix the residual is evaluated at
        samples: Homodyne data
        eta: Detector efficiency of the forward model
        x_bins: Quadrature cells
        phase_bins: Phase cells

    Returns:
        The residual; zero at a maximum of the binned likelihood
    """
    dim = rho.shape[0]
    phase_bins = phase_bins or 8 * dim
    count = len(samples)
    if count == 0:
        raise InsufficientData("Sin muestras")

    low, high = float(samples.x.min()), float(samples.x.max())
    edges = np.linspace(low, max(high, low + 1e-9), x_bins + 1)
    x_index = np.clip(np.searchsorted(edges, samples.x, side="right") - 1, 0, x_bins - 1)
    phase_index = np.clip((samples.phi * phase_bins / np.pi).astype(int), 0, phase_bins - 1)
    cells = np.bincount(phase_index * x_bins + x_index, minlength=phase_bins * x_bins)
    cells = cells.reshape(phase_bins, x_bins)

    # M(x, phi)_ab = M(x, 0)_ab e^{i(a-b)phi}
    nodes, weights = np.polynomial.legendre.leggauss(RESIDUAL_NODES)
    half = np.diff(edges) / 2
    x_nodes = ((edges[:-1] + edges[1:]) / 2)[:, None] + half[:, None] * nodes
    grid = SampleSet(phi=np.zeros(x_nodes.size), x=x_nodes.ravel())
    operators = LikelihoodModel.build(grid, dim, eta, jobs=1).operators
    operators = operators.reshape(x_bins, nodes.size, dim, dim)
    integrated = np.einsum("kgab,kg->kab", operators, half[:, None] * weights)

    offsets = np.subtract.outer(np.arange(dim), np.arange(dim))
    width = np.pi / phase_bins
    smearing = np.sinc(offsets * width / (2 * np.pi))
    R = np.zeros((dim, dim), dtype=complex)
    for b in range(phase_bins):
        occupied = cells[b] > 0
        if not np.any(occupied):
            continue
        center = (b + 0.5) * width
        povm = integrated[occupied] * (smearing * np.exp(1j * offsets * center))
        p = np.maximum(np.einsum("kab,ba->k", povm, rho).real, DENSITY_FLOOR)
        R += np.einsum("k,kab->ab", cells[b][occupied] / p, povm)
    R = (R + R.conj().T) / (2 * count)

    w, v = np.linalg.eigh(rho)
    r = np.einsum("aj,ab,bj->j", v.conj(), R, v).real
    support = w > SUPPORT_FLOOR * max(float(w.max()), DENSITY_FLOOR)
    return float(np.max(np.abs(r[support] - 1.0)))


class MaxLikService:
    """Service for likelihood maximization over truncated density matrices."""

    # ==================== Likelihood ====================

    def log_likelihood(self, T: CholeskyFactor, samples: SampleSet, eta: float = 1.0) -> float:
        """sum_i log p_eta(x_i, phi_i; rho(T)), densities clamped at 1e-300."""
        if len(samples) == 0:
            raise InsufficientData("Sin muestras")
        model = LikelihoodModel.build(samples, T.dim, eta)
        return model.loglik(density_from_cholesky(T))

    # ==================== Reconstruction ====================

    def ml_reconstruct(
        self,
        samples: SampleSet,
        config: MLConfig,
        callback: Callback | None = None,
        model: LikelihoodModel | None = None,
    ) -> tuple[DensityMatrixEstimate, MLReport]:
        """
        Maximize the log-likelihood over density matrices of dimension config.dim.

        Converged once the relative improvement stays below tol for `patience`
        iterations and the stationarity residual is below 10 tol.

        Raises:
            InsufficientData: N < d^2
            NotConverged: when config.raise_on_failure and the run did not converge
        """
        count = len(samples) if model is None else len(model)
        if count < config.dim ** 2:
            raise InsufficientData(f"Se requieren al menos d^2={config.dim ** 2} muestras (N={count})")
        resampled = model is not None
        model = model or LikelihoodModel.build(samples, config.dim, config.eta)
        rho = self._initial_state(config)

        if config.optimizer == MLOptimizer.EXPECTATION_MAXIMIZATION:
            rho, iterations, criterion = self._expectation_maximization(model, rho, config, callback)
        elif config.optimizer == MLOptimizer.PROJECTED_GRADIENT:
            rho, iterations, criterion = self._projected_gradient(model, rho, config, callback)
        else:
            rho, iterations, criterion = self._downhill_simplex(model, rho, config, callback)

        loglik = model.loglik(rho)
        residual = model.stationarity_residual(rho)
        binned = None if resampled else binned_stationarity_residual(rho, samples, config.eta)
        converged = criterion and residual < RESIDUAL_FACTOR * config.tol
        report = MLReport(
            converged=converged,
            iterations=iterations,
            loglik=loglik,
            stationarity_residual=residual,
            binned_residual=binned,
            truncation=config.dim,
            optimizer=config.optimizer,
        )
        estimate = DensityMatrixEstimate(
            matrix=rho,
            errors=np.zeros((config.dim, config.dim)),
            eta=config.eta,
            N=count,
            hermitized=False,
            method="ml",
            diagnostics={
                "loglik": loglik,
                "iters": iterations,
                "stationarity_residual": residual,
                "binned_residual": binned,
                "truncation": config.dim,
                "converged": converged,
            },
        )
        if not converged:
            message = (
                f"Máxima verosimilitud sin convergencia tras {iterations} iteraciones "
                f"(residuo {residual:.3e})"
            )
            if config.raise_on_failure:
                raise NotConverged(message, report=report, result=estimate)
            logger.warning("[ML] %s", message)
        else:
            logger.info("[ML] converged in %d iterations, loglik=%.6f", iterations, loglik)
        return estimate, report

    def _initial_state(self, config: MLConfig) -> np.ndarray:
        if not config.random_start:
            return np.eye(config.dim, dtype=complex) / config.dim
        rng = stream(config.seed, "maxlik.start")
        G = rng.standard_normal((config.dim, config.dim)) + 1j * rng.standard_normal((config.dim, config.dim))
        T = np.triu(G)
        T[np.diag_indices(config.dim)] = np.abs(np.diag(T))
        return density_from_cholesky(CholeskyFactor(dim=config.dim, T=T))

    def _expectation_maximization(
        self,
        model: LikelihoodModel,
        rho: np.ndarray,
        config: MLConfig,
        callback: Callback | None,
    ) -> tuple[np.ndarray, int, bool]:
        """R rho R iteration, diluted (I + eps R) rho (I + eps R) when a full step loses likelihood."""
        identity = np.eye(model.dim)
        current = model.loglik(rho)
        quiet = 0
        for iteration in range(1, config.max_iters + 1):
            R = model.gradient_operator(rho)
            candidate, value = self._em_step(model, rho, R, identity, current)
            if candidate is None:
                return rho, iteration, True
            improvement = (value - current) / max(abs(current), 1.0)
            rho, current = candidate, value
            if callback is not None:
                callback(iteration, current)
            quiet = quiet + 1 if improvement < config.tol else 0
            if quiet >= config.patience and model.stationarity_residual(rho) < RESIDUAL_FACTOR * config.tol:
                return rho, iteration, True
        return rho, config.max_iters, False

    def _em_step(self, model, rho, R, identity, current):
        step = R @ rho @ R
        candidate = step / np.trace(step).real
        value = model.loglik(candidate)
        epsilon = 1.0
        while value < current and epsilon > MIN_DILUTION:
            mix = identity + epsilon * R
            step = mix @ rho @ mix
            candidate = step / np.trace(step).real
            value = model.loglik(candidate)
            epsilon /= 2
        if value < current:
            return None, current
        return (candidate + candidate.conj().T) / 2, value

    def _projected_gradient(
        self,
        model: LikelihoodModel,
        rho: np.ndarray,
        config: MLConfig,
        callback: Callback | None,
    ) -> tuple[np.ndarray, int, bool]:
        """Gradient ascent on rho with eigenvalue projection and Armijo backtracking."""
        current = model.loglik(rho) / len(model)
        step = 1.0
        quiet = 0
        for iteration in range(1, config.max_iters + 1):
            gradient = model.gradient_operator(rho)
            while True:
                candidate = project_density(rho + step * gradient)
                delta = candidate - rho
                value = model.loglik(candidate) / len(model)
                if value >= current + 1e-4 * np.vdot(gradient, delta).real or step < 1e-12:
                    break
                step /= 2
            improvement = (value - current) / max(abs(current), 1.0)
            if value < current:
                return rho, iteration, True
            rho, current = candidate, value
            step = min(step * 2, 1e3)
            if callback is not None:
                callback(iteration, current * len(model))
            quiet = quiet + 1 if improvement < config.tol else 0
            if quiet >= config.patience and model.stationarity_residual(rho) < RESIDUAL_FACTOR * config.tol:
                return rho, iteration, True
        return rho, config.max_iters, False

    def _downhill_simplex(
        self,
        model: LikelihoodModel,
        rho: np.ndarray,
        config: MLConfig,
        callback: Callback | None,
    ) -> tuple[np.ndarray, int, bool]:
        """Nelder-Mead over the d^2 Cholesky parameters."""
        dim = model.dim
        counter = {"calls": 0}

        def objective(params: np.ndarray) -> float:
            T = cholesky_from_params(params, dim)
            if np.trace(T.T.conj().T @ T.T).real <= 0:
                return np.inf
            return -model.loglik(density_from_cholesky(T)) / len(model)

        def report(params: np.ndarray) -> None:
            counter["calls"] += 1
            if callback is not None:
                callback(counter["calls"], -objective(params) * len(model))

        start = params_from_cholesky(cholesky_from_density(rho))
        result = optimize.minimize(
            objective,
            start,
            method="Nelder-Mead",
            callback=report,
            options={"maxiter": config.max_iters, "xatol": config.tol, "fatol": config.tol, "adaptive": True},
        )
        best = density_from_cholesky(cholesky_from_params(result.x, dim))
        return best, int(result.nit), bool(result.success)

    # ==================== Error analysis ====================

    def fisher_information(
        self,
        pdf_family: Callable[[float, np.ndarray], np.ndarray],
        gamma: float,
        grid: Any,
    ) -> float:
        """
        F = int (d p / d gamma)^2 / p dx by trapezoid on the grid, with a
        central difference of step 1e-5 max(1, |gamma|).

        Raises:
            NumericalError: more than 1% of int |dp| lies where p < 1e-14
        """
        grid = np.asarray(grid, dtype=float)
        h = 1e-5 * max(1.0, abs(gamma))
        p = np.asarray(pdf_family(gamma, grid), dtype=float)
        dp = (np.asarray(pdf_family(gamma + h, grid)) - np.asarray(pdf_family(gamma - h, grid))) / (2 * h)
        small = p < 1e-14
        total = trapezoid(np.abs(dp), grid)
        if total > 0 and trapezoid(np.where(small, np.abs(dp), 0.0), grid) > 0.01 * total:
            raise NumericalError("La densidad es casi nula sobre más del 1% de la masa de la derivada")
        integrand = np.where(small, 0.0, dp ** 2 / np.where(small, 1.0, p))
        return float(trapezoid(integrand, grid))

    def cramer_rao_bound(self, fisher: float, count: int) -> float:
        """Variance lower bound 1 / (N F)."""
        if fisher <= 0 or count < 1:
            raise InvalidInput(f"Información de Fisher o N inválidos: F={fisher}, N={count}")
        return 1.0 / (count * fisher)

    def ml_bootstrap(
        self,
        samples: SampleSet,
        config: MLConfig,
        resamples: int,
        seed: int,
        jobs: int | None = None,
    ) -> np.ndarray:
        """
        Element-wise standard deviations of ML estimates over resamples with
        replacement. Non-converged resamples are excluded and counted.
        """
        if resamples < 20:
            raise InsufficientData(f"Se requieren al menos 20 remuestreos (M={resamples})")
        count = len(samples)
        model = LikelihoodModel.build(samples, config.dim, config.eta, jobs)
        strict = config.model_copy(update={"raise_on_failure": True})

        def run(index: int, start: int, stop: int):
            draw = stream(seed, "maxlik.bootstrap", index).integers(0, count, count)
            try:
                estimate, _ = self.ml_reconstruct(samples, strict, model=model.take(draw))
            except NotConverged:
                return None
            return estimate.matrix

        results = map_chunks(run, resamples, jobs, chunk_size=1)
        kept = [r for r in results if r is not None]
        excluded = resamples - len(kept)
        if excluded:
            logger.warning("[ML] bootstrap excluded %d of %d resamples (not converged)", excluded, resamples)
        if len(kept) < 2:
            raise InsufficientData(f"Solo {len(kept)} remuestreos convergieron")
        stack = np.stack(kept)
        return np.sqrt(np.var(stack.real, axis=0, ddof=1) + np.var(stack.imag, axis=0, ddof=1))


@lru_cache()
def get_maxlik_service() -> MaxLikService:
    """Get cached maximum-likelihood service instance."""
    return MaxLikService()
