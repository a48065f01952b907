"""
Detector calibration with a twin beam: joint-record simulation,
faithfulness of bipartite inputs, POVM reconstruction by inverse-map
averaging and by maximum likelihood, and the theoretical POVM of an
inefficient photodetector with thermal dark counts.
"""
import logging
import math
from functools import lru_cache

import numpy as np
from scipy import optimize
from scipy.special import gammaln

from app.core.config import get_settings
from app.core.errors import (
    ConvergenceError,
    EfficiencyTooLow,
    EmptyOutcomeBin,
    InsufficientData,
    InvalidInput,
    NotConverged,
    TruncationError,
)
from app.core.random import map_chunks, stream
from app.schemas.schemas import (
    BipartiteState,
    DetectorModel,
    DiagonalPOVM,
    FaithfulnessReport,
    FockStateSpec,
    JointRecordSet,
    MLConfig,
    MLOptimizer,
    MLReport,
    TwinBeam,
)
from app.services.averaging_service import get_averaging_service
from app.services.state_service import fock_wavefunctions, get_state_service

logger = logging.getLogger(__name__)

SERIES_TOL = 1e-14
SERIES_MAX_TERMS = 10_000
MAX_CANCELLATION = 1e6
FAITHFUL_RATIO = 1e-10
MAX_BIPARTITE_DIMS = 64
COUNT_HEADROOM = 40


def _log_binomial(n: int, k: int) -> float:
    return gammaln(n + 1) - gammaln(k + 1) - gammaln(n - k + 1)


def _splitter_probability(n: int, m: int, l: int, t: float, r: float) -> float:
    """
    |<n, k| U |m, l>|^2 for a beam splitter of amplitude transmissivity t,
    k = m + l - n, signal m and ancilla l; n counted on the detected port.
    """
    k = m + l - n
    if k < 0:
        return 0.0
    js = np.arange(max(0, n - l), min(m, n) + 1)
    if js.size == 0:
        return 0.0
    log_mag = np.array([
        _log_binomial(m, j) + _log_binomial(l, n - j)
        + (j + l - n + j) * math.log(t) + (m - j + n - j) * math.log(r)
        for j in js
    ])
    signs = np.where((m - js) % 2 == 0, 1.0, -1.0)
    prefactor = 0.5 * (gammaln(n + 1) + gammaln(k + 1) - gammaln(m + 1) - gammaln(l + 1))
    top = log_mag.max()
    amplitude = np.sum(signs * np.exp(log_mag - top))
    return float(amplitude ** 2 * math.exp(2 * (top + prefactor)))


def _log_generalized_binomial(top: int, k: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """
    Sign and log magnitude of the generalized binomial (top choose k) for a
    negative integer top: (-a choose k) = (-1)^k (a + k - 1 choose k).
    """
    a = -top
    return np.where(k % 2 == 0, 1.0, -1.0), _log_binomial(a + k - 1, k)


def dark_count_series(eta: float, nbar: float, n: int, m: int) -> tuple[float, float]:
    """
    <m|Pi_n|m> of a detector with efficiency eta and thermal dark counts as the
    double series

        sum_k sum_{j <= min(m, k + n)} (m choose j) (-n-1 choose k) (k+n choose j)
            eta^j ((1 - eta) nbar)^(k+n-j)

    The k-series is the expansion of (1 + N)^(-n-1) in N = (1 - eta) nbar and
    only converges for N < 1.

    Returns:
        (value, largest term magnitude); their ratio measures the cancellation

    Raises:
        ConvergenceError: N >= 1, or a k-series needs more than 10^4 terms
    """
    noise = (1.0 - eta) * nbar
    if not 0.0 < noise < 1.0:
        raise ConvergenceError(f"La serie de cuentas oscuras no converge: (1-eta)*nbar={noise:.4g}")
    j = np.arange(m + 1)[:, None]
    length = 64
    while length <= SERIES_MAX_TERMS:
        k = np.maximum(j - n, 0) + np.arange(length)[None, :]
        signs, log_generalized = _log_generalized_binomial(-n - 1, k)
        log_terms = (
            _log_binomial(m, j) + j * math.log(eta)
            + log_generalized + _log_binomial(k + n, j)
            + (k + n - j) * math.log(noise)
        )
        magnitudes = np.exp(log_terms)
        inner = np.sum(signs * magnitudes, axis=1)
        # past the peak the alternating tail is bounded by the last term
        last = k[:, -1]
        ratio = noise * (n + last + 1) / (last + 1) * (last + n + 1) / (last + n + 1 - j[:, 0])
        settled = (ratio < 1.0) & (magnitudes[:, -1] <= SERIES_TOL * np.maximum(np.abs(inner), 1e-300))
        if settled.all():
            return float(inner.sum()), float(magnitudes.max())
        length *= 4
    raise ConvergenceError(f"Serie de cuentas oscuras sin converger (nbar={nbar}, n={n}, m={m})")


def fock_quadrature_densities(dim: int, x: np.ndarray, eta: float) -> np.ndarray:
    """
    Smeared quadrature densities q_m(x) of Fock states m < dim, shape (dim, N):
    q_m = sqrt(eta) sum_j B(j; m, eta) psi_j(sqrt(eta) x)^2.
    """
    scale = math.sqrt(eta)
    psi2 = fock_wavefunctions(dim - 1, scale * np.asarray(x, dtype=float)) ** 2
    m = np.arange(dim)[:, None]
    j = np.arange(dim)[None, :]
    valid = j <= m
    with np.errstate(divide="ignore", invalid="ignore"):
        log_weights = (
            gammaln(m + 1) - gammaln(j + 1) - gammaln(np.where(valid, m - j, 0) + 1)
            + j * math.log(eta) + (m - j) * (math.log1p(-eta) if eta < 1 else 0.0)
        )
    weights = np.where(valid, np.exp(log_weights), 0.0)
    if eta == 1.0:
        weights = np.eye(dim)
    return scale * weights @ psi2


class CalibrationService:
    """Service for twin-beam calibration of photodetectors."""

    # ==================== Theoretical POVM ====================

    def theoretical_povm(self, eta: float, nbar: float, n: int, m: int) -> float:
        """
        <m|Pi_n|m> for a detector of efficiency eta with thermal dark counts of
        mean nbar.

        nbar = 0 is the binomial law the series sums to. Otherwise the double
        series of dark_count_series is used; when it diverges or cancels more
        than MAX_CANCELLATION, the beam-splitter sum over thermal ancilla
        photons is used instead.

        Raises:
            ConvergenceError: the ancilla series needs more than 10^4 terms
        """
        if not 0 < eta <= 1:
            raise InvalidInput(f"Eficiencia fuera de (0, 1]: {eta}")
        if nbar < 0 or n < 0 or m < 0:
            raise InvalidInput(f"Parámetros inválidos: nbar={nbar}, n={n}, m={m}")
        if eta == 1.0:
            return 1.0 if n == m else 0.0
        if nbar == 0:
            if n > m:
                return 0.0
            return math.exp(_log_binomial(m, n) + n * math.log(eta) + (m - n) * math.log1p(-eta))

        if (1.0 - eta) * nbar < 1.0:
            try:
                value, peak = dark_count_series(eta, nbar, n, m)
                if peak <= MAX_CANCELLATION * max(abs(value), 1e-300):
                    return max(value, 0.0)
            except ConvergenceError:
                pass
        logger.debug("[CALIBRATE] (n=%d, m=%d) eta=%s nbar=%s uses the beam-splitter sum", n, m, eta, nbar)
        return self._thermal_ancilla_povm(eta, nbar, n, m)

    def _thermal_ancilla_povm(self, eta: float, nbar: float, n: int, m: int) -> float:
        """Beam splitter of transmissivity eta mixing |m> with a thermal ancilla, n counted on the signal port."""
        t, r = math.sqrt(eta), math.sqrt(1.0 - eta)
        ratio = nbar / (1.0 + nbar)
        start = max(0, n - m)
        total = 0.0
        for offset in range(SERIES_MAX_TERMS):
            l = start + offset
            weight = ratio ** l / (1.0 + nbar)
            total += weight * _splitter_probability(n, m, l, t, r)
            tail = ratio ** (l + 1)
            if tail <= SERIES_TOL * total or tail <= SERIES_TOL ** 2:
                return total
        raise ConvergenceError(f"Serie de cuentas oscuras sin converger (nbar={nbar}, n={n}, m={m})")

    def theoretical_table(self, eta: float, nbar: float, n_max: int, dim: int) -> DiagonalPOVM:
        """Full table n <= n_max, m < dim, with the n > n_max mass as overflow row."""
        P = np.array([[self.theoretical_povm(eta, nbar, n, m) for m in range(dim)] for n in range(n_max + 1)])
        overflow = np.clip(1.0 - P.sum(axis=0), 0.0, None)
        return DiagonalPOVM(
            n_max=n_max,
            dim=dim,
            P=P,
            overflow=overflow,
            method="theory",
            config={"eta": eta, "nbar": nbar},
        )

    # ==================== Twin beam ====================

    def default_truncation(self, xi: complex, mass: float | None = None) -> int:
        """Smallest d with (1 - |xi|^2) sum_{m<d} |xi|^(2m) = 1 - |xi|^(2d) >= mass."""
        mass = mass if mass is not None else get_settings().calibration_mass
        q = abs(xi) ** 2
        if q == 0:
            return 1
        return max(1, math.ceil(math.log1p(-mass) / math.log(q) - 1e-12))

    def twin_beam_state(self, beam: TwinBeam) -> BipartiteState:
        """Normalized truncated twin beam as a dense two-mode state."""
        d = beam.truncation
        c = beam.coefficients()
        c = c / np.linalg.norm(c)
        vector = np.zeros(d * d, dtype=complex)
        vector[np.arange(d) * d + np.arange(d)] = c
        return BipartiteState(dim_a=d, dim_b=d, matrix=np.outer(vector, vector.conj()))

    # ==================== Faithfulness and inverse map ====================

    def _conditioning_matrix(self, R: BipartiteState) -> np.ndarray:
        """
        Linear map Pi -> Tr_A[(Pi (x) 1) R] as a (dA^2, dB^2) matrix with rows
        (a, a') and columns (b, b'), i.e. the partial transpose on A reshuffled.
        """
        if R.dim_a + R.dim_b > MAX_BIPARTITE_DIMS:
            raise InvalidInput(f"Dimensiones demasiado grandes: {R.dim_a} + {R.dim_b} > {MAX_BIPARTITE_DIMS}")
        R4 = R.matrix.reshape(R.dim_a, R.dim_b, R.dim_a, R.dim_b)
        return np.einsum("kijl->jkil", R4).reshape(R.dim_a ** 2, R.dim_b ** 2)

    def faithfulness_check(self, R: BipartiteState) -> FaithfulnessReport:
        """Invertibility of the reshuffled partial transpose of R."""
        S = self._conditioning_matrix(R)
        singular = np.linalg.svd(S, compute_uv=False)
        smallest, largest = singular[-1], singular[0]
        faithful = bool(R.dim_b >= R.dim_a and largest > 0 and smallest > FAITHFUL_RATIO * largest)
        condition = float(largest / smallest) if smallest > 0 else float("inf")
        return FaithfulnessReport(faithful=faithful, condition_number=condition, singular_values=singular.tolist())

    def reduce_bipartite(self, R: BipartiteState, element: np.ndarray) -> np.ndarray:
        """Unnormalized conditioned state Tr_A[(Pi (x) 1) R] on B."""
        S = self._conditioning_matrix(R)
        element = np.asarray(element, dtype=complex)
        return (element.ravel() @ S).reshape(R.dim_b, R.dim_b)

    def inverse_map(self, R: BipartiteState, conditioned: np.ndarray) -> np.ndarray:
        """
        Recover the POVM element Pi on A from its conditioned state on B.

        Raises:
            InvalidInput: R is not faithful
        """
        report = self.faithfulness_check(R)
        if not report.faithful:
            raise InvalidInput("El estado bipartito no es fiel; el mapa inverso no existe")
        S = self._conditioning_matrix(R)
        target = np.asarray(conditioned, dtype=complex).ravel()
        solution, *_ = np.linalg.lstsq(S.T, target, rcond=None)
        return solution.reshape(R.dim_a, R.dim_a)

    def invert_twin_beam(self, xi: complex, probability: float, diagonal: np.ndarray) -> np.ndarray:
        """Diagonal inverse map P[m] = p(n) rho_mm / ((1 - |xi|^2) |xi|^(2m))."""
        diagonal = np.asarray(diagonal, dtype=float)
        weights = TwinBeam(xi=xi, truncation=diagonal.size).photon_weights()
        return probability * diagonal / weights

    # ==================== Simulation ====================

    def simulate_joint(
        self,
        xi: complex,
        eta: float,
        nbar: float,
        eta_h: float,
        count: int,
        seed: int,
        dim: int | None = None,
        jobs: int | None = None,
    ) -> JointRecordSet:
        """
        Joint records of a twin-beam calibration run.

        The Fock index m of the pair is drawn from the truncated geometric law,
        then n ~ P[n][m] and a homodyne datum of |m> at efficiency eta_h, which
        gives n the marginal p(n) and B the conditioned state rho^(n).

        Raises:
            TruncationError: the truncation holds less than the calibration mass
        """
        if abs(xi) >= 1:
            raise InvalidInput(f"|xi| debe ser < 1: {xi}")
        if count < 1:
            raise InvalidInput(f"Número de registros inválido: {count}")
        dim = dim or self.default_truncation(xi)
        q = abs(xi) ** 2
        kept = 1.0 - q ** dim
        if kept < get_settings().calibration_mass:
            raise TruncationError(f"Truncamiento d={dim} solo contiene {kept:.6f} del haz gemelo")

        weights = TwinBeam(xi=xi, truncation=dim).photon_weights()
        counts_hi = dim + COUNT_HEADROOM
        table = np.array([[self.theoretical_povm(eta, nbar, n, m) for n in range(counts_hi)] for m in range(dim)])
        table /= table.sum(axis=1, keepdims=True)

        rng = stream(seed, "calibration.joint")
        m = rng.choice(dim, size=count, p=weights / weights.sum())
        cumulative = np.cumsum(table, axis=1)
        u = rng.uniform(0.0, 1.0, count)
        n = np.minimum((cumulative[m] <= u[:, None]).sum(axis=1), counts_hi - 1)

        phi = np.empty(count)
        x = np.empty(count)
        states = get_state_service()
        detector = DetectorModel(eta=eta_h)
        for level in np.unique(m):
            rows = np.nonzero(m == level)[0]
            level_seed = int(stream(seed, "calibration.joint.fock", int(level)).integers(0, 2 ** 63 - 1))
            data = states.sample_quadratures(FockStateSpec(n=int(level)), detector, rows.size, level_seed, jobs)
            phi[rows] = data.phi
            x[rows] = data.x
        logger.info("[SIMULATE] %d joint records, xi=%s eta=%s nbar=%s eta_h=%s d=%d", count, xi, eta, nbar, eta_h, dim)
        return JointRecordSet.from_arrays(n, phi, x)

    # ==================== Averaging calibration ====================

    def calibrate_averaging(
        self,
        records: JointRecordSet,
        xi: complex,
        eta_h: float,
        n_max: int,
        dim: int | None = None,
        jobs: int | None = None,
    ) -> DiagonalPOVM:
        """
        P[n][m] from outcome frequencies and the deconvolved diagonal of the
        conditioned homodyne states, through the twin-beam inverse map.
        Errors combine the tomographic bar and a Wilson (z = 1) bar on p(n).

        Raises:
            EfficiencyTooLow: eta_h <= 1/2
            EmptyOutcomeBin: no records for some n <= n_max
        """
        if eta_h <= 0.5:
            raise EfficiencyTooLow(eta_h)
        dim = dim or self.default_truncation(xi)
        total = len(records)
        homodyne = records.homodyne()
        averaging = get_averaging_service()
        P = np.zeros((n_max + 1, dim))
        E = np.zeros((n_max + 1, dim))
        for n in range(n_max + 1):
            rows = np.nonzero(records.n == n)[0]
            if rows.size == 0:
                raise EmptyOutcomeBin(n)
            p, p_err = self._wilson(rows.size, total)
            diagonal, errors = averaging.photon_number_distribution(homodyne.subset(rows), dim, eta_h, jobs)
            P[n] = self.invert_twin_beam(xi, p, diagonal)
            E[n] = np.hypot(
                self.invert_twin_beam(xi, p, errors),
                self.invert_twin_beam(xi, p_err, diagonal),
            )
            logger.debug("[CALIBRATE] outcome n=%d with %d records", n, rows.size)
        logger.info("[CALIBRATE] averaging n_max=%d d=%d N=%d", n_max, dim, total)
        return DiagonalPOVM(
            n_max=n_max,
            dim=dim,
            P=P,
            errors=E,
            method="averaging",
            config={"xi": abs(xi), "eta_h": eta_h, "N": total},
        )

    def _wilson(self, successes: int, total: int, z: float = 1.0) -> tuple[float, float]:
        """Raw frequency and the Wilson score half-width."""
        p = successes / total
        half = z / (1 + z * z / total) * math.sqrt(p * (1 - p) / total + z * z / (4 * total * total))
        return p, half

    # ==================== Maximum-likelihood calibration ====================

    def calibrate_ml(
        self,
        records: JointRecordSet,
        xi: complex,
        eta_h: float,
        n_max: int,
        dim: int | None = None,
        config: MLConfig | None = None,
        refine: bool = False,
        bootstrap: int | None = None,
        jobs: int | None = None,
    ) -> tuple[DiagonalPOVM, MLReport]:
        """
        Maximize sum_i log sum_m c_m P[n_i][m] q_m(x_i) over column-stochastic P,
        outcomes above n_max pooled in an overflow row. Expectation-maximization,
        optionally refined by SLSQP; bootstrap errors (50 resamples by default).

        Raises:
            NotConverged: when config.raise_on_failure and the run did not converge
        """
        if len(records) == 0:
            raise InsufficientData("Sin registros conjuntos")
        settings = get_settings()
        dim = dim or self.default_truncation(xi)
        config = config or MLConfig(dim=dim, eta=eta_h, tol=settings.ml_tol, max_iters=settings.ml_max_iters)
        bootstrap = settings.bootstrap_resamples if bootstrap is None else bootstrap

        prior = TwinBeam(xi=xi, truncation=dim).photon_weights()
        outcomes = np.minimum(records.n, n_max + 1)
        design = (prior[:, None] * fock_quadrature_densities(dim, records.x, eta_h)).T
        start = self._initial_povm(n_max, dim, config)

        P, report = self._em(design, outcomes, start, config)
        if refine:
            P = self._refine(design, outcomes, P)
            report = report.model_copy(update={"loglik": self._loglik(design, outcomes, P)})

        errors = None
        if bootstrap:
            errors = self._bootstrap(design, outcomes, P, config, bootstrap, jobs)

        if not report.converged:
            message = f"Calibración ML sin convergencia tras {report.iterations} iteraciones"
            if config.raise_on_failure:
                raise NotConverged(message, report=report)
            logger.warning("[CALIBRATE] %s", message)
        logger.info("[CALIBRATE] ml n_max=%d d=%d N=%d loglik=%.6f", n_max, dim, len(records), report.loglik)
        povm = DiagonalPOVM(
            n_max=n_max,
            dim=dim,
            P=P[: n_max + 1],
            errors=None if errors is None else errors[: n_max + 1],
            overflow=P[n_max + 1],
            method="ml",
            config={"xi": abs(xi), "eta_h": eta_h, "N": len(records), "bootstrap": bootstrap, "refine": refine},
        )
        return povm, report

    def _initial_povm(self, n_max: int, dim: int, config: MLConfig) -> np.ndarray:
        rows = n_max + 2
        if not config.random_start:
            return np.full((rows, dim), 1.0 / rows)
        rng = stream(config.seed, "calibration.start")
        return rng.dirichlet(np.ones(rows), size=dim).T

    def _loglik(self, design: np.ndarray, outcomes: np.ndarray, P: np.ndarray) -> float:
        p = np.einsum("im,im->i", design, P[outcomes])
        return float(np.sum(np.log(np.maximum(p, 1e-300))))

    def _em_update(self, design: np.ndarray, outcomes: np.ndarray, P: np.ndarray) -> np.ndarray:
        """P[n][m] <- expected (n, m) counts / expected m counts."""
        joint = design * P[outcomes]
        joint /= np.maximum(joint.sum(axis=1, keepdims=True), 1e-300)
        counts = np.stack([joint[outcomes == n].sum(axis=0) for n in range(P.shape[0])])
        column = counts.sum(axis=0)
        updated = np.where(column > 0, counts / np.where(column > 0, column, 1.0), P)
        return updated

    def _em(
        self,
        design: np.ndarray,
        outcomes: np.ndarray,
        P: np.ndarray,
        config: MLConfig,
    ) -> tuple[np.ndarray, MLReport]:
        current = self._loglik(design, outcomes, P)
        quiet = 0
        converged = False
        iterations = config.max_iters
        for iteration in range(1, config.max_iters + 1):
            P = self._em_update(design, outcomes, P)
            value = self._loglik(design, outcomes, P)
            improvement = (value - current) / max(abs(current), 1.0)
            current = value
            quiet = quiet + 1 if improvement < config.tol else 0
            if quiet >= config.patience:
                converged, iterations = True, iteration
                break
        residual = float(np.max(np.abs(self._em_update(design, outcomes, P) - P)))
        report = MLReport(
            converged=converged,
            iterations=iterations,
            loglik=current,
            stationarity_residual=residual,
            truncation=P.shape[1],
            optimizer=MLOptimizer.EXPECTATION_MAXIMIZATION,
        )
        return P, report

    def _refine(self, design: np.ndarray, outcomes: np.ndarray, P: np.ndarray) -> np.ndarray:
        """SLSQP over P in [0, 1] with unit column sums."""
        rows, dim = P.shape
        count = design.shape[0]
        indicator = np.zeros((count, rows))
        indicator[np.arange(count), outcomes] = 1.0

        def objective(flat: np.ndarray):
            Q = flat.reshape(rows, dim)
            p = np.maximum(np.einsum("im,im->i", design, Q[outcomes]), 1e-300)
            gradient = -(indicator.T @ (design / p[:, None]))
            return -float(np.sum(np.log(p))) / count, gradient.ravel() / count

        constraints = [
            {"type": "eq", "fun": (lambda flat, m=m: flat.reshape(rows, dim)[:, m].sum() - 1.0)}
            for m in range(dim)
        ]
        result = optimize.minimize(
            objective,
            P.ravel(),
            jac=True,
            method="SLSQP",
            bounds=[(0.0, 1.0)] * P.size,
            constraints=constraints,
        )
        refined = np.clip(result.x.reshape(rows, dim), 0.0, 1.0)
        refined /= refined.sum(axis=0, keepdims=True)
        if self._loglik(design, outcomes, refined) < self._loglik(design, outcomes, P):
            return P
        return refined

    def _bootstrap(
        self,
        design: np.ndarray,
        outcomes: np.ndarray,
        P: np.ndarray,
        config: MLConfig,
        resamples: int,
        jobs: int | None,
    ) -> np.ndarray:
        if resamples < 20:
            raise InsufficientData(f"Se requieren al menos 20 remuestreos (M={resamples})")
        count = design.shape[0]

        def run(index: int, start: int, stop: int):
            draw = stream(config.seed, "calibration.bootstrap", index).integers(0, count, count)
            estimate, report = self._em(design[draw], outcomes[draw], P, config)
            return estimate if report.converged else None

        results = map_chunks(run, resamples, jobs, chunk_size=1)
        kept = [r for r in results if r is not None]
        if resamples - len(kept):
            logger.warning("[CALIBRATE] bootstrap excluded %d of %d resamples", resamples - len(kept), resamples)
        if len(kept) < 2:
            raise InsufficientData(f"Solo {len(kept)} remuestreos convergieron")
        return np.std(np.stack(kept), axis=0, ddof=1)


@lru_cache()
def get_calibration_service() -> CalibrationService:
    """Get cached calibration service instance."""
    return CalibrationService()
