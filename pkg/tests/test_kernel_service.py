"""
Tests for KernelService.
"""
import math

import mpmath
import numpy as np
import pytest
from scipy.integrate import trapezoid

from app.core.errors import DomainError, EfficiencyTooLow, FockIndexError
from app.schemas.schemas import CoherentStateSpec, DetectorModel, MatrixStateSpec, complex_pairs
from app.services.kernel_service import (
    KernelService,
    FockKernelBank,
    parabolic_cylinder_D,
    scaled_parabolic_sequence,
)
from app.services.state_service import StateService


def _unit_operator(n: int, m: int, dim: int = 7) -> np.ndarray:
    """|m><n|, whose expectation is rho_nm."""
    A = np.zeros((dim, dim), dtype=complex)
    A[m, n] = 1.0
    return A


class TestKernelService:
    """Test cases for KernelService."""

    def setup_method(self):
        """Setup test fixtures."""
        self.service = KernelService()

    # ==================== Parabolic cylinder tests ====================

    def test_parabolic_cylinder_at_origin(self):
        """Test D_0(0) = 1 and D_-1(0) = sqrt(pi/2)"""
        assert parabolic_cylinder_D(0, 0j) == pytest.approx(1.0, abs=1e-15)
        assert parabolic_cylinder_D(-1, 0j) == pytest.approx(1.2533141373155, abs=1e-12)

    def test_parabolic_cylinder_matches_mpmath(self):
        """Test D_-8(-3i) against arbitrary-precision evaluation"""
        expected = complex(mpmath.pcfd(-8, mpmath.mpc(0, -3)))
        assert parabolic_cylinder_D(-8, -3j) == pytest.approx(expected, rel=1e-9, abs=1e-14)

    @pytest.mark.parametrize("order", [0, 1, 2, 5, 8])
    @pytest.mark.parametrize("y", [-3.0, -1.2, 0.5, 2.0])
    def test_downward_sequence_matches_mpmath(self, order, y):
        """Test the downward recurrence on a grid of orders and arguments"""
        sequence = scaled_parabolic_sequence(order, np.array(y))
        expected = complex(mpmath.pcfd(-order, mpmath.mpc(0, y))) * math.exp(-y * y / 4)
        assert complex(sequence[order]) == pytest.approx(expected, rel=1e-9, abs=1e-14)

    def test_miller_sequence_is_normalized(self):
        """Test the alternative direction pins D~_0 to one"""
        sequence = scaled_parabolic_sequence(8, np.array(-3.0), direction="miller")
        assert complex(sequence[0]) == pytest.approx(1.0)

    def test_unknown_direction_raises(self):
        """Test unknown recurrence directions are rejected"""
        with pytest.raises(DomainError):
            scaled_parabolic_sequence(3, np.array(0.0), direction="sideways")

    def test_positive_order_raises(self):
        """Test positive orders are outside the supported domain"""
        with pytest.raises(DomainError):
            parabolic_cylinder_D(2, 1j)

    def test_real_argument_raises(self):
        """Test arguments off the imaginary axis are rejected"""
        with pytest.raises(DomainError):
            parabolic_cylinder_D(-2, 1.0 + 0.5j)

    # ==================== Kernel value tests ====================

    def test_off_diagonal_kernel_vanishes_at_origin(self):
        """Test kernel_fock(0, 1, 0, 0) = 0"""
        assert abs(self.service.kernel_fock(0, 1, 0.0, 0.0)) < 1e-12

    def test_vacuum_kernel_at_origin(self):
        """Test kernel_fock(0, 0, 0, 0) = 2 for an ideal detector"""
        assert self.service.kernel_fock(0, 0, 0.0, 0.0) == pytest.approx(2.0, abs=1e-12)

    def test_kernel_matches_oracle_example(self):
        """Test kernel_fock(2, 5) at x = 1.1, phi = 0.7 against direct quadrature"""
        value = self.service.kernel_fock(2, 5, 1.1, 0.7)
        oracle = self.service.kernel_oracle(_unit_operator(2, 5), 1.1, 0.7)
        assert abs(value - oracle) < 1e-6

    @pytest.mark.parametrize("eta", [1.0, 0.85])
    def test_kernel_matches_oracle_small_grid(self, eta):
        """Test all pairs n, m <= 3 against the oracle at phi = 0.9"""
        x = np.array([-3.0, -1.5, 0.0, 0.7, 2.4])
        for n in range(4):
            for m in range(4):
                values = self.service.kernel_fock(n, m, x, np.full(x.shape, 0.9), eta)
                oracle = self.service.kernel_oracle(_unit_operator(n, m), x, 0.9, eta)
                np.testing.assert_allclose(values, oracle, atol=1e-6)

    @pytest.mark.slow
    @pytest.mark.parametrize("eta", [1.0, 0.85])
    @pytest.mark.parametrize("phi", [0.0, 0.9, 2.2])
    def test_kernel_matches_oracle_full_grid(self, eta, phi):
        """Test all pairs n, m <= 6 against the oracle"""
        x = np.array([-3.0, -1.5, 0.0, 0.7, 2.4])
        for n in range(7):
            for m in range(7):
                values = self.service.kernel_fock(n, m, x, np.full(x.shape, phi), eta)
                oracle = self.service.kernel_oracle(_unit_operator(n, m), x, phi, eta)
                np.testing.assert_allclose(values, oracle, atol=1e-6)

    def test_kernel_is_hermitian(self):
        """Test kernel_fock(n, m) = conj(kernel_fock(m, n))"""
        for n, m in [(0, 3), (2, 5), (1, 4)]:
            a = self.service.kernel_fock(n, m, 0.37, 1.3, 0.9)
            b = self.service.kernel_fock(m, n, 0.37, 1.3, 0.9)
            assert a == pytest.approx(np.conj(b), abs=1e-14)

    def test_kernel_phase_covariance(self):
        """Test kernel_fock(n, m, x, phi) = e^{i(n-m)phi} kernel_fock(n, m, x, 0)"""
        n, m, x, phi = 1, 4, -0.8, 2.1
        rotated = self.service.kernel_fock(n, m, x, phi)
        base = self.service.kernel_fock(n, m, x, 0.0)
        assert rotated == pytest.approx(np.exp(1j * (n - m) * phi) * base, abs=1e-12)

    def test_scalar_and_vector_paths_agree(self):
        """Test cached scalar values equal the vectorized evaluator"""
        x = np.array([-1.1, 0.2, 2.5])
        phi = np.array([0.3, 1.7, 2.9])
        vector = self.service.kernel_fock(2, 3, x, phi, 0.9)
        scalar = [self.service.kernel_fock(2, 3, float(a), float(b), 0.9) for a, b in zip(x, phi)]
        np.testing.assert_allclose(vector, scalar, atol=1e-14)

    def test_bank_matches_single_evaluators(self):
        """Test the kernel bank evaluates every canonical pair like its evaluator"""
        bank = FockKernelBank.full(4, 0.9)
        x = np.linspace(-2, 2, 7)
        phi = np.linspace(0, 3, 7)
        values = bank.evaluate(x, phi)
        for i, (n, m) in enumerate(bank.pairs):
            np.testing.assert_allclose(values[i], self.service.evaluator(n, m, 0.9)(x, phi), atol=1e-13)

    def test_kernel_averages_to_density_matrix(self):
        """Test the phase-averaged integral of kernel times density recovers rho_nm"""
        states = StateService()
        alpha = 0.5 + 0.3j
        state = CoherentStateSpec(alpha=[alpha.real, alpha.imag])
        rho = states.expand(state).elements
        x = np.linspace(-7, 7, 4001)
        phases = np.arange(64) * np.pi / 64
        for eta in (1.0, 0.85):
            det = DetectorModel(eta=eta)
            density = np.stack([states.quadrature_pdf(state, phi, x, det) for phi in phases])
            for n, m in [(0, 0), (1, 1), (0, 2), (3, 1)]:
                kernel = np.stack([self.service.kernel_fock(n, m, x, np.full(x.shape, phi), eta) for phi in phases])
                estimate = trapezoid(kernel * density, x, axis=1).mean()
                assert estimate == pytest.approx(rho[n, m], abs=1e-6)

    def test_kernel_averages_to_mixed_state(self):
        """Test recovery of an explicit mixed state with coherences"""
        states = StateService()
        rho = np.array([[0.5, 0.2 - 0.1j, 0.0], [0.2 + 0.1j, 0.3, 0.05j], [0.0, -0.05j, 0.2]])
        state = MatrixStateSpec(rho=complex_pairs(rho))
        x = np.linspace(-7, 7, 4001)
        phases = np.arange(16) * np.pi / 16
        density = np.stack([states.quadrature_pdf(state, phi, x) for phi in phases])
        for n in range(3):
            for m in range(3):
                kernel = np.stack([self.service.kernel_fock(n, m, x, np.full(x.shape, phi)) for phi in phases])
                assert trapezoid(kernel * density, x, axis=1).mean() == pytest.approx(rho[n, m], abs=1e-6)

    # ==================== Validation tests ====================

    def test_efficiency_at_half_raises(self):
        """Test eta = 1/2 cannot be deconvolved"""
        with pytest.raises(EfficiencyTooLow):
            self.service.kernel_fock(0, 0, 0.0, 0.0, 0.5)

    def test_efficiency_out_of_range_raises(self):
        """Test eta > 1 is outside the domain"""
        with pytest.raises(DomainError):
            self.service.evaluator(0, 0, 1.2)

    def test_negative_index_raises(self):
        """Test negative Fock indices are rejected"""
        with pytest.raises(FockIndexError):
            self.service.kernel_fock(-1, 0, 0.0, 0.0)

    def test_oracle_rejects_low_efficiency(self):
        """Test the oracle shares the efficiency bound"""
        with pytest.raises(EfficiencyTooLow):
            self.service.kernel_oracle(np.eye(2), 0.0, 0.0, 0.4)

    def test_evaluator_is_immutable(self):
        """Test evaluators cannot be modified after construction"""
        evaluator = self.service.evaluator(1, 2)
        with pytest.raises(AttributeError):
            evaluator.n = 5

    # ==================== Table tests ====================

    def test_kernel_table_rows(self):
        """Test the table covers dim^2 pairs on the grid"""
        rows = self.service.kernel_table(2, 0.9, np.array([-1.0, 0.0, 1.0]), np.array([0.0, 0.5]))
        assert len(rows) == 4 * 3 * 2
        n, m, x, phi, eta, re, im = rows[0]
        assert (n, m, x, phi, eta) == (0, 0, -1.0, 0.0, 0.9)
        assert complex(re, im) == pytest.approx(self.service.kernel_fock(0, 0, -1.0, 0.0, 0.9))
