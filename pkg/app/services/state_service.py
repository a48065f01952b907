"""
Single-mode states in the truncated Fock basis: expansion of analytic
states, quadrature densities through a lossy homodyne detector, and
seeded homodyne sampling.

Quadrature convention: X_phi = (a^dag e^{i phi} + a e^{-i phi}) / 2,
vacuum variance 1/4.
"""
import json
import logging
import math
from functools import lru_cache
from typing import Any, Union

import numpy as np
from pydantic import TypeAdapter, ValidationError
from scipy.integrate import cumulative_trapezoid
from scipy.special import gammaln

from app.core.config import get_settings
from app.core.errors import FockIndexError, InvalidInput, TruncationError
from app.core.random import map_chunks, stream
from app.schemas.schemas import (
    CoherentStateSpec,
    DetectorModel,
    FockDensityMatrix,
    FockStateSpec,
    MatrixStateSpec,
    SampleSet,
    StateModel,
    ThermalStateSpec,
    complex_from_pairs,
)

logger = logging.getLogger(__name__)

TRACE_LOSS_TOL = 1e-8
STREAM_LABEL = "states.sample"

StateLike = Union[FockStateSpec, CoherentStateSpec, ThermalStateSpec, MatrixStateSpec, FockDensityMatrix]

_state_adapter = TypeAdapter(StateModel)


def fock_wavefunctions(n_max: int, x: Any) -> np.ndarray:
    """
    Quadrature wavefunctions psi_0 .. psi_{n_max} evaluated at x.

    psi_n(x) = (2/pi)^(1/4) (2^n n!)^(-1/2) H_n(sqrt(2) x) exp(-x^2), built by
    the upward recurrence on normalized functions.

    Returns:
        Array of shape (n_max + 1,) + x.shape
    """
    if n_max < 0:
        raise FockIndexError(f"Índice de Fock negativo: {n_max}")
    x = np.asarray(x, dtype=float)
    psi = np.empty((n_max + 1,) + x.shape)
    psi[0] = (2.0 / np.pi) ** 0.25 * np.exp(-x * x)
    if n_max >= 1:
        psi[1] = 2.0 * x * psi[0]
    for n in range(1, n_max):
        psi[n + 1] = (2.0 * x * psi[n] - math.sqrt(n) * psi[n - 1]) / math.sqrt(n + 1)
    return psi


def fock_wavefunction(n: int, x: Any) -> Any:
    """Single quadrature wavefunction psi_n(x)."""
    if n < 0:
        raise FockIndexError(f"Índice de Fock negativo: {n}")
    values = fock_wavefunctions(n, x)[n]
    return float(values) if values.ndim == 0 else values


@lru_cache(maxsize=64)
def loss_kraus_operators(eta: float, dim: int) -> tuple[np.ndarray, ...]:
    """
    Kraus operators A_k = sum_n sqrt(C(n,k) eta^(n-k) (1-eta)^k) |n-k><n| of
    the pure-loss channel on a dim-dimensional Fock space.
    """
    if eta == 1.0:
        return (np.eye(dim),)
    levels = np.arange(dim)
    operators = []
    for k in range(dim):
        n = levels[k:]
        log_weight = (
            gammaln(n + 1) - gammaln(k + 1) - gammaln(n - k + 1)
            + (n - k) * math.log(eta) + k * math.log1p(-eta)
        )
        A = np.zeros((dim, dim))
        A[n - k, n] = np.exp(0.5 * log_weight)
        operators.append(A)
    return tuple(operators)


class StateService:
    """Service for state expansion, quadrature densities and homodyne sampling."""

    # ==================== State specifications ====================

    def parse_state(self, data: Union[str, bytes, dict]) -> StateLike:
        """
        Parse a JSON state description.

        Args:
            data: JSON text or decoded object, e.g. {"type": "coherent", "alpha": [1, 0]}

        Returns:
            Validated state description
        """
        try:
            if isinstance(data, (str, bytes)):
                data = json.loads(data)
            return _state_adapter.validate_python(data)
        except (ValidationError, json.JSONDecodeError) as e:
            raise InvalidInput(f"Especificación de estado inválida: {e}") from e

    def default_truncation(self, state: StateLike) -> int:
        """Truncation used when the state leaves it open."""
        if isinstance(state, FockDensityMatrix):
            return state.dim
        if state.truncation is not None:
            return state.truncation
        if isinstance(state, FockStateSpec):
            return state.n + 1
        if isinstance(state, CoherentStateSpec):
            amplitude = abs(state.alpha)
            return max(20, math.ceil(amplitude ** 2 + 6 * amplitude + 10))
        if isinstance(state, ThermalStateSpec):
            if state.nbar == 0:
                return 1
            ratio = state.nbar / (1.0 + state.nbar)
            return max(1, math.ceil(math.log(TRACE_LOSS_TOL / 10) / math.log(ratio)))
        return len(state.rho)

    def expand(self, state: StateLike) -> FockDensityMatrix:
        """
        Expand a state into a normalized FockDensityMatrix.

        Raises:
            TruncationError: if more than 1e-8 of the trace lies above the truncation
        """
        if isinstance(state, FockDensityMatrix):
            return state
        d = self.default_truncation(state)

        if isinstance(state, FockStateSpec):
            if state.n >= d:
                raise TruncationError(f"Truncamiento d={d} no contiene |{state.n}>")
            rho = np.zeros((d, d), dtype=complex)
            rho[state.n, state.n] = 1.0
            return FockDensityMatrix(dim=d, elements=rho)

        if isinstance(state, CoherentStateSpec):
            amplitudes = np.empty(d, dtype=complex)
            amplitudes[0] = math.exp(-abs(state.alpha) ** 2 / 2)
            for n in range(1, d):
                amplitudes[n] = amplitudes[n - 1] * state.alpha / math.sqrt(n)
            kept = float(np.sum(np.abs(amplitudes) ** 2))
            self._check_trace(kept, d, "coherente")
            return FockDensityMatrix.from_array(np.outer(amplitudes, amplitudes.conj()))

        if isinstance(state, ThermalStateSpec):
            n = np.arange(d)
            populations = (state.nbar ** n) / (1.0 + state.nbar) ** (n + 1)
            self._check_trace(float(populations.sum()), d, "térmico")
            return FockDensityMatrix.from_array(np.diag(populations))

        try:
            return FockDensityMatrix.from_array(complex_from_pairs(state.rho))
        except ValueError as e:
            raise InvalidInput(f"Matriz densidad inválida: {e}") from e

    def _check_trace(self, kept: float, d: int, family: str) -> None:
        if 1.0 - kept > TRACE_LOSS_TOL:
            raise TruncationError(
                f"Estado {family} truncado en d={d} pierde {1.0 - kept:.3e} de la traza"
            )

    # ==================== Detector model ====================

    def attenuate(self, state: StateLike, eta: float) -> FockDensityMatrix:
        """
        Pure-loss channel sum_k A_k rho A_k^dag at efficiency eta.

        The smeared homodyne density of rho equals sqrt(eta) times the ideal
        density of the attenuated state at sqrt(eta) x.
        """
        rho = self.expand(state)
        if eta == 1.0:
            return rho
        lossy = sum(A @ rho.elements @ A.T for A in loss_kraus_operators(float(eta), rho.dim))
        return FockDensityMatrix.from_array(lossy)

    # ==================== Quadrature densities ====================

    def quadrature_pdf(
        self,
        state: StateLike,
        phi: Any,
        x: Any,
        det: DetectorModel | None = None,
    ) -> Any:
        """
        Homodyne density p_eta(x, phi).

        Args:
            state: State description or expanded matrix
            phi: LO phase (scalar or array broadcastable against x)
            x: Quadrature outcome(s)
            det: Detector model (ideal if omitted)

        Returns:
            Density values, clamped at 0, with the shape of x
        """
        det = det or DetectorModel(eta=1.0)
        rho = self.attenuate(state, det.eta).elements
        scalar = np.ndim(x) == 0 and np.ndim(phi) == 0
        x, phi = np.broadcast_arrays(np.asarray(x, dtype=float), np.asarray(phi, dtype=float))
        scale = math.sqrt(det.eta)
        amplitudes = self._phased_wavefunctions(rho.shape[0], scale * x.ravel(), phi.ravel())
        density = np.einsum("ni,nm,mi->i", amplitudes.conj(), rho, amplitudes).real * scale
        density = np.maximum(density, 0.0).reshape(x.shape)
        return float(density) if scalar else density

    def _phased_wavefunctions(self, dim: int, x: np.ndarray, phi: np.ndarray) -> np.ndarray:
        """c_m = e^{i m phi} psi_m(x), shape (dim, N)."""
        psi = fock_wavefunctions(dim - 1, x)
        return psi * np.exp(1j * np.outer(np.arange(dim), phi))

    # ==================== Sampling ====================

    def sample_quadratures(
        self,
        state: StateLike,
        det: DetectorModel,
        count: int,
        seed: int,
        jobs: int | None = None,
    ) -> SampleSet:
        """
        Draw homodyne samples: phi uniform on [0, pi), x by inverse CDF of the
        ideal density, then Gaussian detector noise of variance Delta^2.

        Deterministic given seed; identical for every jobs value.
        """
        if count < 1:
            raise InvalidInput(f"Número de muestras inválido: {count}")
        rho = self.expand(state)
        table = _CdfTable.build(rho.elements)
        sigma = math.sqrt(det.delta2)

        def draw(chunk: int, start: int, stop: int) -> tuple[np.ndarray, np.ndarray]:
            rng = stream(seed, STREAM_LABEL, chunk)
            size = stop - start
            phi = rng.uniform(0.0, np.pi, size)
            x = table.invert(phi, rng.uniform(0.0, 1.0, size))
            noise = rng.standard_normal(size)
            if sigma > 0:
                x = x + sigma * noise
            return phi, x

        chunks = map_chunks(draw, count, jobs)
        phi = np.concatenate([c[0] for c in chunks])
        x = np.concatenate([c[1] for c in chunks])
        logger.debug("[SIMULATE] %d samples, d=%d, eta=%s, %d chunks", count, rho.dim, det.eta, len(chunks))
        return SampleSet.from_arrays(phi, x)

    # ==================== Summaries ====================

    def photon_statistics(self, state: StateLike) -> np.ndarray:
        """Photon-number distribution (diagonal of the expanded state)."""
        return np.diag(self.expand(state).elements).real.copy()

    def trace_distance(self, a: np.ndarray, b: np.ndarray) -> float:
        """(1/2) ||a - b||_1 for Hermitian matrices of possibly different size."""
        a, b = _pad_pair(np.asarray(a, dtype=complex), np.asarray(b, dtype=complex))
        diff = (a - b + (a - b).conj().T) / 2
        return 0.5 * float(np.sum(np.abs(np.linalg.eigvalsh(diff))))

    def fidelity(self, a: np.ndarray, b: np.ndarray) -> float:
        """Uhlmann fidelity (Tr sqrt(sqrt(a) b sqrt(a)))^2."""
        a, b = _pad_pair(np.asarray(a, dtype=complex), np.asarray(b, dtype=complex))
        w, v = np.linalg.eigh((a + a.conj().T) / 2)
        root = (v * np.sqrt(np.clip(w, 0, None))) @ v.conj().T
        inner = root @ b @ root
        eig = np.linalg.eigvalsh((inner + inner.conj().T) / 2)
        return float(np.sum(np.sqrt(np.clip(eig, 0, None))) ** 2)


def _pad_pair(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    size = max(a.shape[0], b.shape[0])
    out = []
    for m in (a, b):
        padded = np.zeros((size, size), dtype=complex)
        padded[: m.shape[0], : m.shape[1]] = m
        out.append(padded)
    return out[0], out[1]


class _CdfTable:
    """
    Phase-Fourier decomposition of the cumulative distribution on a grid:
    F(x_j, phi) = Re sum_k w_k e^{i k phi} Q_k(x_j), w_0 = 1, w_k = 2.
    """

    def __init__(self, grid: np.ndarray, cumulative: np.ndarray):
        self.grid = grid
        self.cumulative = cumulative
        self.orders = np.arange(cumulative.shape[0])
        self.weights = np.where(self.orders == 0, 1.0, 2.0)

    @classmethod
    def build(cls, rho: np.ndarray) -> "_CdfTable":
        settings = get_settings()
        d = rho.shape[0]
        half_width = math.sqrt(d) + settings.pdf_grid_margin
        grid = np.linspace(-half_width, half_width, settings.pdf_grid_points)
        psi = fock_wavefunctions(d - 1, grid)
        components = np.zeros((d, grid.size), dtype=complex)
        for k in range(d):
            components[k] = np.einsum("n,ng,ng->g", np.diagonal(rho, offset=k), psi[: d - k], psi[k:])
        cumulative = cumulative_trapezoid(components, grid, axis=1, initial=0.0)
        return cls(grid, cumulative)

    def evaluate(self, index: np.ndarray, phases: np.ndarray) -> np.ndarray:
        """F at grid index[i] for per-sample phase factors, shape (N,)."""
        terms = phases * self.cumulative[:, index].T
        return (terms @ self.weights).real

    def invert(self, phi: np.ndarray, u: np.ndarray) -> np.ndarray:
        """Bisection on the grid index, then linear interpolation."""
        phases = np.exp(1j * np.outer(phi, self.orders))
        last = self.grid.size - 1
        lo = np.zeros(phi.size, dtype=np.int64)
        hi = np.full(phi.size, last, dtype=np.int64)
        target = u * self.evaluate(hi, phases)
        while np.any(hi - lo > 1):
            mid = (lo + hi) // 2
            below = self.evaluate(mid, phases) <= target
            lo = np.where(below, mid, lo)
            hi = np.where(below, hi, mid)
        f_lo = self.evaluate(lo, phases)
        f_hi = self.evaluate(hi, phases)
        span = f_hi - f_lo
        frac = np.divide(target - f_lo, span, out=np.zeros_like(span), where=span > 0)
        frac = np.clip(frac, 0.0, 1.0)
        return self.grid[lo] + frac * (self.grid[hi] - self.grid[lo])


@lru_cache()
def get_state_service() -> StateService:
    """Get cached state service instance."""
    return StateService()
