"""
Tests for MaxLikService.
"""
import math

import numpy as np
import pytest

from app.core.errors import InsufficientData, InvalidInput, NotConverged, NumericalError
from app.schemas.schemas import (
    CoherentStateSpec,
    DetectorModel,
    MatrixStateSpec,
    MLConfig,
    MLOptimizer,
    SampleSet,
    complex_pairs,
)
from app.services.averaging_service import get_averaging_service
from app.services.maxlik_service import (
    LikelihoodModel,
    MaxLikService,
    binned_stationarity_residual,
    cholesky_from_density,
    cholesky_from_params,
    density_from_cholesky,
    params_from_cholesky,
    project_density,
    project_to_simplex,
)
from app.services.state_service import get_state_service

MIXED_RHO = np.array([
    [0.5, 0.2 - 0.1j, 0.0],
    [0.2 + 0.1j, 0.3, 0.05j],
    [0.0, -0.05j, 0.2],
])


@pytest.fixture(scope="module")
def mixed_state():
    """Full-rank qutrit state with coherences."""
    return MatrixStateSpec(rho=complex_pairs(MIXED_RHO))


@pytest.fixture(scope="module")
def mixed_samples(mixed_state):
    """3000 ideal samples of the qutrit state."""
    return get_state_service().sample_quadratures(mixed_state, DetectorModel(eta=1.0), 3000, seed=21)


class TestMaxLikService:
    """Test cases for MaxLikService."""

    def setup_method(self):
        """Setup test fixtures."""
        self.service = MaxLikService()
        self.config = MLConfig(dim=3, tol=1e-6, max_iters=5000, patience=5)

    # ==================== Parameterization tests ====================

    def test_cholesky_round_trip(self):
        """Test rho -> T -> rho for a full-rank state"""
        T = cholesky_from_density(MIXED_RHO)
        assert np.all(np.tril(T.T, -1) == 0)
        assert np.all(np.diag(T.T).real >= 0)
        np.testing.assert_allclose(density_from_cholesky(T), MIXED_RHO, atol=1e-12)

    def test_cholesky_of_pure_state(self):
        """Test a rank-one state still has a valid factor"""
        v = np.array([0.6, 0.8j])
        T = cholesky_from_density(np.outer(v, v.conj()))
        np.testing.assert_allclose(density_from_cholesky(T), np.outer(v, v.conj()), atol=1e-12)

    def test_params_round_trip(self):
        """Test the d^2 real parameters reproduce T"""
        T = cholesky_from_density(MIXED_RHO)
        params = params_from_cholesky(T)
        assert params.size == 9
        np.testing.assert_allclose(cholesky_from_params(params, 3).T, T.T, atol=1e-15)

    def test_params_wrong_length_raises(self):
        """Test the parameter count must be d^2"""
        with pytest.raises(InvalidInput):
            cholesky_from_params(np.ones(5), 3)

    def test_zero_factor_raises(self):
        """Test T = 0 has no density matrix"""
        with pytest.raises(InvalidInput):
            density_from_cholesky(cholesky_from_params(np.zeros(4), 2))

    def test_project_to_simplex(self):
        """Test the Euclidean simplex projection"""
        np.testing.assert_allclose(project_to_simplex(np.array([0.5, 0.5])), [0.5, 0.5])
        np.testing.assert_allclose(project_to_simplex(np.array([2.0, 0.0])), [1.0, 0.0])
        projected = project_to_simplex(np.array([-1.0, 0.2, 0.3]))
        np.testing.assert_allclose(projected, [0.0, 0.45, 0.55])

    def test_project_density_is_physical(self):
        """Test the projected matrix is a state"""
        projected = project_density(np.diag([0.9, 0.4, -0.3]).astype(complex))
        assert np.trace(projected).real == pytest.approx(1.0)
        assert np.linalg.eigvalsh(projected).min() > -1e-12

    # ==================== Likelihood tests ====================

    @pytest.mark.parametrize("eta", [1.0, 0.8, 0.4])
    def test_model_probabilities_match_densities(self, mixed_state, eta):
        """Test Tr[rho M_i] equals the lossy homodyne density"""
        samples = get_state_service().sample_quadratures(mixed_state, DetectorModel(eta=1.0), 50, seed=2)
        model = LikelihoodModel.build(samples, 3, eta)
        expected = get_state_service().quadrature_pdf(mixed_state, samples.phi, samples.x, DetectorModel(eta=eta))
        np.testing.assert_allclose(model.probabilities(MIXED_RHO), expected, rtol=1e-10, atol=1e-14)

    def test_log_likelihood_is_sum_of_log_densities(self, mixed_state, mixed_samples):
        """Test log_likelihood(T) = sum log p(x_i, phi_i)"""
        subset = mixed_samples.subset(slice(0, 200))
        value = self.service.log_likelihood(cholesky_from_density(MIXED_RHO), subset)
        densities = get_state_service().quadrature_pdf(mixed_state, subset.phi, subset.x)
        assert value == pytest.approx(np.sum(np.log(densities)), rel=1e-10)

    def test_gradient_operator_trace_identity(self, mixed_samples):
        """Test Tr[rho R] = 1 for any state"""
        model = LikelihoodModel.build(mixed_samples, 3, 1.0)
        rho = np.eye(3) / 3
        assert np.trace(rho @ model.gradient_operator(rho)).real == pytest.approx(1.0)

    def test_stationarity_residual_of_rank_deficient_maximum(self):
        """Test an empty direction with <j|R|j> < 1 does not count against a maximum"""
        ground = np.diag([1.0, 0.0]).astype(complex).ravel()
        model = LikelihoodModel(np.stack([ground, ground]), 2, 1.0)
        rho = np.diag([1.0, 0.0]).astype(complex)
        np.testing.assert_allclose(model.gradient_operator(rho), np.diag([1.0, 0.0]))
        assert model.stationarity_residual(rho) == 0.0

    def test_stationarity_residual_away_from_maximum(self):
        """Test the weighted and excess terms on a projective two-outcome model"""
        ground = np.diag([1.0, 0.0]).astype(complex).ravel()
        excited = np.diag([0.0, 1.0]).astype(complex).ravel()
        model = LikelihoodModel(np.stack([ground, ground, ground, excited]), 2, 1.0)
        assert model.stationarity_residual(np.diag([0.75, 0.25]).astype(complex)) == pytest.approx(0.0, abs=1e-12)
        assert model.stationarity_residual(np.eye(2, dtype=complex) / 2) == pytest.approx(0.5)

    def test_binned_residual_tracks_continuous_residual(self, mixed_samples):
        """Test fine cells reproduce max_j |<j|R|j> - 1| of the exact densities"""
        rho = np.diag([0.2, 0.3, 0.5]).astype(complex)
        R = LikelihoodModel.build(mixed_samples, 3, 1.0).gradient_operator(rho)
        expected = float(np.max(np.abs(np.diag(R).real - 1.0)))
        binned = binned_stationarity_residual(rho, mixed_samples, 1.0)
        assert expected > 0.1
        assert binned == pytest.approx(expected, abs=0.02)

    def test_binned_residual_vanishes_near_maximum(self, mixed_samples):
        """Test the binned residual is reported and small at the likelihood maximum"""
        estimate, report = self.service.ml_reconstruct(mixed_samples, self.config)
        assert report.binned_residual is not None
        assert report.binned_residual < 0.05
        assert estimate.diagnostics["binned_residual"] == report.binned_residual

    def test_binned_residual_requires_samples(self):
        """Test an empty dataset has no residual"""
        empty = SampleSet(phi=np.zeros(0), x=np.zeros(0))
        with pytest.raises(InsufficientData):
            binned_stationarity_residual(np.eye(2) / 2, empty, 1.0)

    # ==================== Reconstruction tests ====================

    def test_expectation_maximization_recovers_state(self, mixed_samples):
        """Test EM converges to a physical state near the truth"""
        estimate, report = self.service.ml_reconstruct(mixed_samples, self.config)
        assert report.converged
        assert report.stationarity_residual < 10 * self.config.tol
        assert np.trace(estimate.matrix).real == pytest.approx(1.0)
        assert np.linalg.eigvalsh(estimate.matrix).min() > -1e-12
        assert get_state_service().trace_distance(estimate.matrix, MIXED_RHO) < 0.1
        assert estimate.method == "ml"
        assert set(estimate.diagnostics) == {
            "loglik", "iters", "stationarity_residual", "binned_residual", "truncation", "converged",
        }

    def test_likelihood_never_decreases(self, mixed_samples):
        """Test the EM iterates have non-decreasing likelihood"""
        values = []
        self.service.ml_reconstruct(mixed_samples, self.config, callback=lambda i, ll: values.append(ll))
        assert len(values) > 1
        assert np.all(np.diff(values) >= -1e-9)

    def test_projected_gradient_matches_em(self, mixed_samples):
        """Test both backends reach the same maximum"""
        _, em = self.service.ml_reconstruct(mixed_samples, self.config)
        config = self.config.model_copy(update={"optimizer": MLOptimizer.PROJECTED_GRADIENT})
        _, pg = self.service.ml_reconstruct(mixed_samples, config)
        assert pg.loglik == pytest.approx(em.loglik, abs=0.5)

    def test_downhill_simplex_matches_em(self, mixed_samples):
        """Test Nelder-Mead on the Cholesky parameters for a qubit truncation"""
        config = MLConfig(dim=2, tol=1e-8, max_iters=4000, patience=5)
        subset = mixed_samples.subset(slice(0, 800))
        _, em = self.service.ml_reconstruct(subset, config)
        simplex_config = config.model_copy(update={"optimizer": MLOptimizer.DOWNHILL_SIMPLEX})
        _, simplex = self.service.ml_reconstruct(subset, simplex_config)
        assert simplex.loglik == pytest.approx(em.loglik, abs=0.05)

    def test_random_start_is_seeded(self, mixed_samples):
        """Test random starts reach the same estimate for the same seed"""
        config = self.config.model_copy(update={"random_start": True, "seed": 5})
        a, _ = self.service.ml_reconstruct(mixed_samples, config)
        b, _ = self.service.ml_reconstruct(mixed_samples, config)
        np.testing.assert_array_equal(a.matrix, b.matrix)

    def test_random_starts_reach_one_maximum(self, mixed_samples):
        """Test five random starts agree on the maximum log-likelihood"""
        values = []
        for seed in range(5):
            config = MLConfig(dim=3, tol=1e-12, max_iters=200_000, patience=5, random_start=True, seed=seed)
            _, report = self.service.ml_reconstruct(mixed_samples, config)
            values.append(report.loglik)
        assert max(values) - min(values) < 1e-6

    def test_lossy_coherent_state(self, poisson_one):
        """Test alpha = 1 through eta = 0.8 at d=8: diagonal within 0.02 of Poisson"""
        state = CoherentStateSpec(alpha=[1.0, 0.0])
        samples = get_state_service().sample_quadratures(state, DetectorModel(eta=0.8), 50_000, seed=13)
        config = MLConfig(dim=8, eta=0.8, tol=1e-8, max_iters=20_000, patience=5)
        estimate, _ = self.service.ml_reconstruct(samples, config)
        np.testing.assert_allclose(np.diag(estimate.matrix).real, poisson_one, atol=0.02)

    @pytest.mark.slow
    def test_ml_is_usually_closer_than_averaging(self):
        """Test ML beats averaging in RMS error on at least 16 of 20 coherent data sets"""
        state = CoherentStateSpec(alpha=[1.0, 0.0])
        truth = get_state_service().expand(state).elements[:8, :8]
        config = MLConfig(dim=8, eta=0.9, tol=1e-8, max_iters=20_000, patience=5)
        averaging = get_averaging_service()
        wins = 0
        for seed in range(20):
            samples = get_state_service().sample_quadratures(state, DetectorModel(eta=0.9), 50_000, seed=200 + seed)
            ml, _ = self.service.ml_reconstruct(samples, config)
            direct = averaging.reconstruct_density_matrix(samples, 8, eta=0.9)
            ml_rms = np.sqrt(np.mean(np.abs(ml.matrix - truth) ** 2))
            direct_rms = np.sqrt(np.mean(np.abs(direct.matrix - truth) ** 2))
            wins += ml_rms <= direct_rms
        assert wins >= 16

    def test_low_efficiency_is_allowed(self, mixed_state):
        """Test the forward model accepts eta below one half"""
        samples = get_state_service().sample_quadratures(mixed_state, DetectorModel(eta=0.4), 500, seed=8)
        config = self.config.model_copy(update={"eta": 0.4, "max_iters": 200})
        estimate, report = self.service.ml_reconstruct(samples, config)
        assert estimate.eta == 0.4
        assert report.iterations <= 200

    def test_not_converged_carries_partial_result(self, mixed_samples):
        """Test max_iters exhaustion with raise_on_failure"""
        config = self.config.model_copy(update={"max_iters": 1, "raise_on_failure": True})
        with pytest.raises(NotConverged) as exc_info:
            self.service.ml_reconstruct(mixed_samples, config)
        assert exc_info.value.report.iterations == 1
        assert exc_info.value.result.matrix.shape == (3, 3)

    def test_not_converged_warns_by_default(self, mixed_samples):
        """Test max_iters exhaustion returns the partial estimate"""
        config = self.config.model_copy(update={"max_iters": 1})
        estimate, report = self.service.ml_reconstruct(mixed_samples, config)
        assert not report.converged
        assert estimate.diagnostics["converged"] is False

    def test_requires_d_squared_samples(self, mixed_samples):
        """Test N < d^2 raises"""
        with pytest.raises(InsufficientData):
            self.service.ml_reconstruct(mixed_samples.subset(slice(0, 8)), self.config)

    # ==================== Error analysis tests ====================

    def test_fisher_information_of_gaussian_location(self):
        """Test F = 1 / sigma^2 for a shifted vacuum density"""
        def family(gamma, x):
            return math.sqrt(2 / math.pi) * np.exp(-2 * (x - gamma) ** 2)

        fisher = self.service.fisher_information(family, 0.3, np.linspace(-6, 6, 4001))
        assert fisher == pytest.approx(4.0, rel=1e-4)
        assert self.service.cramer_rao_bound(fisher, 1000) == pytest.approx(1 / 4000, rel=1e-4)

    def test_fisher_information_vanishing_density_raises(self):
        """Test derivative mass on a negligible density is rejected"""
        def family(gamma, x):
            return 1e-20 * (1 + gamma * x ** 2)

        with pytest.raises(NumericalError):
            self.service.fisher_information(family, 0.5, np.linspace(-1, 1, 101))

    def test_cramer_rao_rejects_zero_information(self):
        """Test F = 0 has no bound"""
        with pytest.raises(InvalidInput):
            self.service.cramer_rao_bound(0.0, 100)

    def test_ml_bootstrap(self, mixed_samples):
        """Test bootstrap spreads are finite, small and seeded"""
        config = MLConfig(dim=2, tol=1e-5, max_iters=2000, patience=3)
        subset = mixed_samples.subset(slice(0, 400))
        errors = self.service.ml_bootstrap(subset, config, 20, seed=3, jobs=1)
        again = self.service.ml_bootstrap(subset, config, 20, seed=3, jobs=2)
        assert errors.shape == (2, 2)
        assert np.all(errors >= 0) and np.all(errors < 0.3)
        np.testing.assert_allclose(errors, again, atol=1e-12)

    def test_ml_bootstrap_requires_twenty_resamples(self, mixed_samples):
        """Test M < 20 raises"""
        with pytest.raises(InsufficientData):
            self.service.ml_bootstrap(mixed_samples, self.config, 5, seed=1)
