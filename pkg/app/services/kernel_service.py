"""
Homodyne tomography kernels (pattern functions).

kernel_fock(n, m) estimates rho_nm = <n|rho|m>. For n <= m it equals
e^{i(n-m)phi} R_nm(x), with R_nm real:

    R_nm(x) = sqrt(n!/m!) 2^-d c_d / 2 * int_0^inf r^(d+1) e^(-s r^2) L_n^(d)(r^2/4) trig(r x) dr

d = m - n, s = (2 eta - 1) / (8 eta), trig = cos for even d and sin for odd d,
c_d = (-1)^floor(d/2). Expanding the Laguerre polynomial gives a finite sum
of scaled parabolic cylinder functions D~_{-nu}(i y) = e^{-y^2/4} D_{-nu}(i y)
with y = x / sqrt(2 s). Pairs whose sum cancels badly use Gauss-Legendre
quadrature of the same r-integral instead.
"""
import logging
import math
from functools import lru_cache
from typing import Any, Literal

import numpy as np
from scipy.integrate import quad_vec
from scipy.linalg import eigh_tridiagonal
from scipy.special import eval_genlaguerre, gammaln, roots_legendre, wofz

from app.core.config import get_settings
from app.core.errors import ConvergenceError, DomainError, EfficiencyTooLow, FockIndexError

logger = logging.getLogger(__name__)

X_QUANTUM = 1e-9
MAX_CANCELLATION = 1e6
ORACLE_MAX_DIM = 30
ORACLE_ACCURACY = 1e-7

Direction = Literal["downward", "miller"]


# ==================== Parabolic cylinder functions ====================

def scaled_parabolic_sequence(order_max: int, y: Any, direction: Direction = "downward") -> np.ndarray:
    """
    D~_{-k}(i y) = e^{-y^2/4} D_{-k}(i y) for k = 0 .. order_max.

    "downward" seeds D~_0 = 1 and D~_{-1} = sqrt(pi/2) w(-y/sqrt 2) and runs
    D_{-k-1} = (D_{-k+1} - z D_{-k}) / k. "miller" starts above order_max
    from arbitrary values and runs the recurrence upward, normalizing to
    D~_0 = 1; kept to show it does not converge for imaginary argument.

    Returns:
        Complex array of shape (order_max + 1,) + y.shape
    """
    y = np.asarray(y, dtype=float)
    z = 1j * y
    seq = np.empty((order_max + 1,) + y.shape, dtype=complex)

    if direction == "downward":
        seq[0] = 1.0
        if order_max >= 1:
            seq[1] = math.sqrt(math.pi / 2) * wofz(-y / math.sqrt(2))
        for k in range(1, order_max):
            seq[k + 1] = (seq[k - 1] - z * seq[k]) / k
        return seq

    if direction == "miller":
        top = order_max + 40
        upper = np.zeros(y.shape, dtype=complex)
        current = np.full(y.shape, 1e-30, dtype=complex)
        values = {top: current}
        for k in range(top, 0, -1):
            upper, current = current, z * current + k * upper
            values[k - 1] = current
        for k in range(order_max + 1):
            seq[k] = values[k] / values[0]
        return seq

    raise DomainError(f"Dirección de recurrencia desconocida: {direction}")


def parabolic_cylinder_D(order: int, z: complex) -> complex:
    """
    D_order(z) for nonpositive integer order and purely imaginary z.

    Raises:
        DomainError: positive or non-integer order, or z off the imaginary axis
    """
    if int(order) != order or order > 0:
        raise DomainError(f"Orden no soportado: {order} (se requiere entero <= 0)")
    z = complex(z)
    if abs(z.real) > 1e-12 * max(1.0, abs(z)):
        raise DomainError(f"Argumento no imaginario puro: {z}")
    k = -int(order)
    y = z.imag
    scaled = scaled_parabolic_sequence(k, np.array(y))[k]
    return complex(scaled * math.exp(y * y / 4))


# ==================== Closed-form and quadrature plans ====================

def _check_efficiency(eta: float) -> None:
    if not 0 < eta <= 1:
        raise DomainError(f"Eficiencia fuera de rango: {eta}")
    if eta <= 0.5:
        raise EfficiencyTooLow(eta)


def _quantize(x: np.ndarray) -> np.ndarray:
    return np.round(np.asarray(x, dtype=float) / X_QUANTUM) * X_QUANTUM


class _ClosedFormPlan:
    """Coefficients of R_nm as a sum over scaled parabolic cylinder functions."""

    kind = "closed"

    def __init__(self, n: int, m: int, eta: float):
        d = m - n
        self.odd = bool(d % 2)
        self.beta = (2 * eta - 1) / (4 * eta)
        k = np.arange(n + 1)
        self.orders = d + 2 + 2 * k
        c_d = (-1) ** (d // 2)
        log_mag = (
            0.5 * (gammaln(n + 1) - gammaln(m + 1))
            - d * math.log(2) - math.log(2)
            + gammaln(m + 1) - gammaln(n - k + 1) - gammaln(d + k + 1)
            - gammaln(k + 1) - k * math.log(4)
            - 0.5 * self.orders * math.log(self.beta) + gammaln(self.orders)
        )
        self.coefficients = c_d * (-1.0) ** k * np.exp(log_mag)
        # sum of |terms| at their maximum (y = 0) bounds the cancellation
        log_at_origin = 0.5 * math.log(math.pi) - 0.5 * self.orders * math.log(2) - gammaln((self.orders + 1) / 2)
        self.cancellation = float(np.sum(np.abs(self.coefficients) * np.exp(log_at_origin)))

    def radial(self, sequence: np.ndarray) -> np.ndarray:
        terms = sequence[self.orders]
        part = -terms.imag if self.odd else terms.real
        return np.tensordot(self.coefficients, part, axes=1)


class _QuadraturePlan:
    """Gauss-Legendre nodes and weighted envelope for the r-integral of R_nm."""

    kind = "quadrature"

    def __init__(self, n: int, m: int, eta: float):
        d = m - n
        self.odd = bool(d % 2)
        s = (2 * eta - 1) / (8 * eta)
        self.n, self.m, self.s = n, m, s
        self.prefactor = (-1) ** (d // 2) * 0.5 * math.exp(0.5 * (gammaln(n + 1) - gammaln(m + 1)) - d * math.log(2))
        self.r_max = self._support()

    def envelope(self, r: np.ndarray) -> np.ndarray:
        d = self.m - self.n
        with np.errstate(over="ignore", under="ignore"):
            return self.prefactor * r ** (d + 1) * np.exp(-self.s * r * r) * eval_genlaguerre(self.n, d, r * r / 4)

    def _support(self) -> float:
        r = np.linspace(0.05, 120.0, 2400)
        magnitude = np.abs(self.envelope(r))
        tail = np.maximum.accumulate(magnitude[::-1])[::-1]
        cutoff = 1e-15 * max(1.0, float(magnitude.max()))
        inside = np.nonzero(tail >= cutoff)[0]
        return float(r[inside[-1]]) + 0.5 if inside.size else float(r[-1])

    def radial(self, x: np.ndarray) -> np.ndarray:
        return _quadrature_radial([self], x)[0]


@lru_cache(maxsize=32)
def _legendre_nodes(count: int) -> tuple[np.ndarray, np.ndarray]:
    return roots_legendre(count)


def _quadrature_radial(plans: list, x: np.ndarray, block: int = 4096) -> np.ndarray:
    """R for several quadrature plans on one shared Gauss-Legendre rule, shape (plans, N)."""
    x = np.asarray(x, dtype=float)
    r_max = max(p.r_max for p in plans)
    oscillation = max(2 * math.sqrt(p.n + p.m + 2) for p in plans)
    count = 32 + int(math.ceil(r_max * (float(np.max(np.abs(x), initial=0.0)) + oscillation)))
    nodes, weights = _legendre_nodes(count)
    r = 0.5 * r_max * (nodes + 1)
    columns = np.stack([0.5 * r_max * weights * p.envelope(r) for p in plans], axis=1)
    odd = np.array([p.odd for p in plans])
    out = np.empty((len(plans), x.size))
    for start in range(0, x.size, block):
        phase = np.outer(x[start:start + block], r)
        if np.any(~odd):
            out[~odd, start:start + block] = (np.cos(phase) @ columns[:, ~odd]).T
        if np.any(odd):
            out[odd, start:start + block] = (np.sin(phase) @ columns[:, odd]).T
    return out


@lru_cache(maxsize=4096)
def _plan(n: int, m: int, eta: float):
    closed = _ClosedFormPlan(n, m, eta)
    if closed.cancellation <= MAX_CANCELLATION:
        return closed
    logger.debug("[KERNEL] (%d,%d) eta=%s uses quadrature (cancellation %.2e)", n, m, eta, closed.cancellation)
    return _QuadraturePlan(n, m, eta)


class KernelEvaluator:
    """
    Immutable evaluator of kernel_fock(n, m, ., ., eta).

    Values for n > m are the exact conjugates of the (m, n) pair.
    """

    __slots__ = ("n", "m", "eta", "_lo", "_hi", "_plan")

    def __init__(self, n: int, m: int, eta: float = 1.0):
        if n < 0 or m < 0:
            raise FockIndexError(f"Índices de Fock negativos: ({n}, {m})")
        _check_efficiency(eta)
        object.__setattr__(self, "n", int(n))
        object.__setattr__(self, "m", int(m))
        object.__setattr__(self, "eta", float(eta))
        object.__setattr__(self, "_lo", min(self.n, self.m))
        object.__setattr__(self, "_hi", max(self.n, self.m))
        object.__setattr__(self, "_plan", _plan(self._lo, self._hi, self.eta))

    def __setattr__(self, name, value):
        raise AttributeError("KernelEvaluator is immutable")

    def radial(self, x: Any) -> np.ndarray:
        """Real factor R(x) of the canonical (n <= m) pair."""
        xq = _quantize(np.atleast_1d(x))
        plan = self._plan
        if plan.kind == "closed":
            sequence = scaled_parabolic_sequence(int(plan.orders[-1]), xq / math.sqrt(plan.beta))
            return plan.radial(sequence)
        return plan.radial(xq)

    def __call__(self, x: Any, phi: Any) -> Any:
        scalar = np.ndim(x) == 0 and np.ndim(phi) == 0
        x, phi = np.broadcast_arrays(np.asarray(x, dtype=float), np.asarray(phi, dtype=float))
        radial = self.radial(x.ravel()).reshape(x.shape)
        value = np.exp(1j * (self._lo - self._hi) * phi) * radial
        if self.n > self.m:
            value = np.conj(value)
        return complex(value) if scalar else value


class FockKernelBank:
    """Canonical pairs n <= m evaluated together on a chunk of samples."""

    def __init__(self, pairs: list[tuple[int, int]], eta: float = 1.0):
        _check_efficiency(eta)
        if any(n < 0 or m < n for n, m in pairs):
            raise FockIndexError(f"Pares no canónicos: {pairs}")
        self.eta = float(eta)
        self.pairs = list(pairs)
        self.plans = [_plan(n, m, self.eta) for n, m in self.pairs]
        self.beta = (2 * eta - 1) / (4 * eta)
        closed_orders = [int(p.orders[-1]) for p in self.plans if p.kind == "closed"]
        self.order_max = max(closed_orders, default=0)
        self.differences = np.array([n - m for n, m in self.pairs])
        self._closed = [i for i, p in enumerate(self.plans) if p.kind == "closed"]
        self._quadrature = [i for i, p in enumerate(self.plans) if p.kind == "quadrature"]

    @classmethod
    def full(cls, dim: int, eta: float = 1.0) -> "FockKernelBank":
        return cls([(n, m) for n in range(dim) for m in range(n, dim)], eta)

    @classmethod
    def diagonal(cls, dim: int, eta: float = 1.0) -> "FockKernelBank":
        return cls([(n, n) for n in range(dim)], eta)

    def radial(self, x: np.ndarray) -> np.ndarray:
        """R for every pair, shape (pairs, N)."""
        xq = _quantize(x)
        out = np.empty((len(self.pairs), xq.size))
        if self._closed:
            sequence = scaled_parabolic_sequence(self.order_max, xq / math.sqrt(self.beta))
            for i in self._closed:
                out[i] = self.plans[i].radial(sequence)
        if self._quadrature:
            out[self._quadrature] = _quadrature_radial([self.plans[i] for i in self._quadrature], xq)
        return out

    def evaluate(self, x: np.ndarray, phi: np.ndarray) -> np.ndarray:
        """kernel_fock for every canonical pair, shape (pairs, N)."""
        return np.exp(1j * np.outer(self.differences, phi)) * self.radial(x)


# ==================== Oracle ====================

@lru_cache(maxsize=8)
def _quadrature_spectrum(size: int) -> tuple[np.ndarray, np.ndarray]:
    """Eigen-decomposition of X_0 truncated at size."""
    off = np.sqrt(np.arange(1, size)) / 2
    return eigh_tridiagonal(np.zeros(size), off)


class KernelService:
    """Service for Fock-basis kernels and the generic quadrature oracle."""

    def evaluator(self, n: int, m: int, eta: float = 1.0) -> KernelEvaluator:
        return KernelEvaluator(n, m, eta)

    def kernel_fock(self, n: int, m: int, x: Any, phi: Any, eta: float = 1.0) -> Any:
        """
        Pattern function whose average over homodyne data is <n|rho|m>.

        Args:
            n, m: Fock indices
            x, phi: Homodyne outcome(s) and phase(s)
            eta: Detector efficiency to deconvolve (1 = none)

        Returns:
            Complex value (scalar inputs) or array
        """
        if np.ndim(x) == 0 and np.ndim(phi) == 0:
            if n < 0 or m < 0:
                raise FockIndexError(f"Índices de Fock negativos: ({n}, {m})")
            _check_efficiency(eta)
            lo, hi = min(n, m), max(n, m)
            radial = _cached_radial(lo, hi, float(eta), int(round(float(x) / X_QUANTUM)))
            value = np.exp(1j * (lo - hi) * float(phi)) * radial
            return complex(np.conj(value) if n > m else value)
        return self.evaluator(n, m, eta)(x, phi)

    def kernel_bank(self, dim: int, eta: float = 1.0, diagonal: bool = False) -> FockKernelBank:
        return FockKernelBank.diagonal(dim, eta) if diagonal else FockKernelBank.full(dim, eta)

    def kernel_oracle(self, op_matrix: Any, x: Any, phi: float, eta: float = 1.0) -> Any:
        """
        Kernel of an arbitrary truncated operator A by direct quadrature of

            int_0^inf (r/2) e^{r^2 Delta^2/2} sum_j w_j cos(r (lambda_j - x)) dr

        where lambda_j are eigenvalues of X_0 on an enlarged Fock space and
        w_j = (V^T e^{-i phi N} A e^{i phi N} V)_jj.

        Raises:
            EfficiencyTooLow: eta <= 1/2
            ConvergenceError: quadrature error above 1e-7
        """
        _check_efficiency(eta)
        A = np.atleast_2d(np.asarray(op_matrix, dtype=complex))
        d = A.shape[0]
        if A.shape != (d, d) or d > ORACLE_MAX_DIM:
            raise DomainError(f"Operador no soportado: forma {A.shape} (máximo {ORACLE_MAX_DIM})")
        scalar = np.ndim(x) == 0
        xs = np.atleast_1d(np.asarray(x, dtype=float))

        s = (2 * eta - 1) / (8 * eta)
        half_delta2 = (1 - eta) / (8 * eta)
        occupied = np.nonzero(np.any(A != 0, axis=0) | np.any(A != 0, axis=1))[0]
        top = int(occupied.max()) if occupied.size else 0
        norm = max(float(np.sum(np.abs(A))), 1e-300)

        r_max = 1.0
        while (
            math.log(r_max / 2) + math.log(norm) - s * r_max ** 2 + top * math.log1p(r_max ** 2 / 4)
            > math.log(1e-14)
            or r_max < 2 * math.sqrt(top + 1)
        ):
            r_max += 0.25
        t_max = r_max ** 2 / 4
        size = int(math.ceil(t_max + 10 * math.sqrt(t_max) + 2 * d + 40))
        eigenvalues, vectors = _quadrature_spectrum(size)

        levels = np.arange(d)
        rotated = np.exp(-1j * phi * levels)[:, None] * A * np.exp(1j * phi * levels)[None, :]
        head = vectors[:d]
        weights = np.einsum("aj,ab,bj->j", head, rotated, head)
        offsets = eigenvalues[:, None] - xs[None, :]

        def integrand(r: float) -> np.ndarray:
            value = (r / 2) * math.exp(r * r * half_delta2) * (weights @ np.cos(r * offsets))
            return np.concatenate([value.real, value.imag])

        result, error, info = quad_vec(
            integrand, 0.0, r_max, epsabs=1e-10, epsrel=1e-12, norm="max", limit=2000, full_output=True
        )
        if not info.success or error > ORACLE_ACCURACY:
            raise ConvergenceError(f"Cuadratura del oráculo no convergió: error={error:.2e}")
        values = result[: xs.size] + 1j * result[xs.size:]
        return complex(values[0]) if scalar else values

    def kernel_table(
        self, dim: int, eta: float, x_grid: np.ndarray, phi_grid: np.ndarray
    ) -> list[tuple[int, int, float, float, float, float, float]]:
        """Rows (n, m, x, phi, eta, re, im) for all n, m < dim on the grid."""
        x_grid = np.asarray(x_grid, dtype=float)
        rows = []
        for n in range(dim):
            for m in range(dim):
                evaluator = self.evaluator(n, m, eta)
                for phi in np.asarray(phi_grid, dtype=float):
                    values = evaluator(x_grid, np.full(x_grid.shape, phi))
                    rows.extend(
                        (n, m, float(x), float(phi), float(eta), float(v.real), float(v.imag))
                        for x, v in zip(x_grid, values)
                    )
        return rows


def _radial_cache_size() -> int:
    return get_settings().kernel_cache_size


@lru_cache(maxsize=_radial_cache_size())
def _cached_radial(lo: int, hi: int, eta: float, x_key: int) -> float:
    """R_{lo,hi}(x) memoized on (lo, hi, eta, x quantized to 1e-9)."""
    evaluator = KernelEvaluator(lo, hi, eta)
    return float(evaluator.radial(np.array([x_key * X_QUANTUM]))[0])


@lru_cache()
def get_kernel_service() -> KernelService:
    """Get cached kernel service instance."""
    return KernelService()
