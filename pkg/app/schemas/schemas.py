"""
Pydantic schemas for states, samples, estimates, POVMs and run configuration.
Complex numbers cross JSON as [re, im] pairs.
"""
from enum import Enum
from pathlib import Path
from typing import Annotated, Any, List, Literal, Optional, Union

import numpy as np
from pydantic import BaseModel, BeforeValidator, Field, PlainSerializer, field_validator, model_validator


def _to_complex(value: Any) -> complex:
    """Accept a number or an [re, im] pair."""
    if isinstance(value, (list, tuple)):
        if len(value) != 2:
            raise ValueError("complex numbers are written as [re, im]")
        return complex(float(value[0]), float(value[1]))
    if isinstance(value, dict) and {"re", "im"} <= set(value):
        return complex(float(value["re"]), float(value["im"]))
    return complex(value)


ComplexNumber = Annotated[
    complex,
    BeforeValidator(_to_complex),
    PlainSerializer(lambda z: [z.real, z.imag], return_type=list),
]


def complex_pairs(array: np.ndarray) -> list:
    """Nested [re, im] lists for a complex array."""
    array = np.asarray(array, dtype=complex)
    return np.stack([array.real, array.imag], axis=-1).tolist()


def complex_from_pairs(pairs: Any) -> np.ndarray:
    """Inverse of complex_pairs."""
    array = np.asarray(pairs, dtype=float)
    if array.shape[-1] != 2:
        raise ValueError("complex entries are written as [re, im]")
    return array[..., 0] + 1j * array[..., 1]


# ==================== Validation Schemas ====================

class ValidationResult(BaseModel):
    """Single file validation result."""
    validation_type: str
    row_number: Optional[int] = None
    column_name: Optional[str] = None
    message: str
    severity: str = "warning"


# ==================== State Schemas ====================

class FockStateSpec(BaseModel):
    """Number state |n>."""
    type: Literal["fock"] = "fock"
    n: int = Field(..., ge=0)
    truncation: Optional[int] = Field(default=None, ge=1)


class CoherentStateSpec(BaseModel):
    """Coherent state |alpha>."""
    type: Literal["coherent"] = "coherent"
    alpha: ComplexNumber = Field(...)
    truncation: Optional[int] = Field(default=None, ge=1)


class ThermalStateSpec(BaseModel):
    """Thermal state with mean photon number nbar."""
    type: Literal["thermal"] = "thermal"
    nbar: float = Field(..., ge=0)
    truncation: Optional[int] = Field(default=None, ge=1)


class MatrixStateSpec(BaseModel):
    """Explicit density matrix, rows of [re, im] pairs."""
    type: Literal["matrix"] = "matrix"
    rho: List[List[List[float]]] = Field(...)
    truncation: Optional[int] = Field(default=None, ge=1)

    @model_validator(mode="after")
    def _check_square(self) -> "MatrixStateSpec":
        d = len(self.rho)
        if d == 0 or any(len(row) != d for row in self.rho):
            raise ValueError("rho must be a non-empty square matrix")
        if self.truncation is not None and self.truncation != d:
            raise ValueError(f"truncation {self.truncation} differs from matrix dimension {d}")
        return self


StateModel = Annotated[
    Union[FockStateSpec, CoherentStateSpec, ThermalStateSpec, MatrixStateSpec],
    Field(discriminator="type"),
]


class FockDensityMatrix(BaseModel):
    """Truncated density matrix, elements[n][m] = <n|rho|m>."""
    dim: int = Field(..., ge=1)
    elements: np.ndarray

    class Config:
        arbitrary_types_allowed = True

    @model_validator(mode="after")
    def _check_invariants(self) -> "FockDensityMatrix":
        rho = self.elements
        if rho.shape != (self.dim, self.dim):
            raise ValueError(f"elements shape {rho.shape} does not match dim {self.dim}")
        if not np.array_equal(rho, rho.conj().T):
            raise ValueError("density matrix must be exactly Hermitian")
        if abs(np.trace(rho).real - 1.0) > 1e-12:
            raise ValueError(f"trace {np.trace(rho).real!r} differs from 1")
        if np.linalg.eigvalsh(rho)[0] < -1e-10:
            raise ValueError("density matrix is not positive semidefinite")
        return self

    @classmethod
    def from_array(cls, array: np.ndarray, hermitian_tol: float = 1e-8) -> "FockDensityMatrix":
        """Symmetrize, normalize and validate a square array."""
        rho = np.array(array, dtype=complex)
        if rho.ndim != 2 or rho.shape[0] != rho.shape[1]:
            raise ValueError("density matrix must be square")
        scale = max(1.0, float(np.max(np.abs(rho))))
        if np.max(np.abs(rho - rho.conj().T)) > hermitian_tol * scale:
            raise ValueError("density matrix is not Hermitian")
        rho = (rho + rho.conj().T) / 2
        trace = np.trace(rho).real
        if trace <= 0:
            raise ValueError("density matrix has non-positive trace")
        rho = rho / trace
        rho = (rho + rho.conj().T) / 2
        return cls(dim=rho.shape[0], elements=rho)

    def to_pairs(self) -> list:
        return complex_pairs(self.elements)


# ==================== Detector and Sample Schemas ====================

class DetectorModel(BaseModel):
    """Homodyne detector of quantum efficiency eta."""
    eta: float = Field(default=1.0, gt=0, le=1)

    @property
    def delta2(self) -> float:
        """Smearing variance (1 - eta) / (4 eta)."""
        return (1.0 - self.eta) / (4.0 * self.eta)


def normalize_phase(phi: np.ndarray, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Map (phi + pi, x) -> (phi, -x) so every phase lies in [0, pi)."""
    phi = np.mod(np.asarray(phi, dtype=float), 2 * np.pi)
    x = np.array(x, dtype=float)
    upper = phi >= np.pi
    phi = np.where(upper, phi - np.pi, phi)
    x = np.where(upper, -x, x)
    # mod can round up to exactly pi
    wrap = phi >= np.pi
    phi = np.where(wrap, 0.0, phi)
    x = np.where(wrap, -x, x)
    return phi, x


class SampleSet(BaseModel):
    """Homodyne data as parallel arrays."""
    phi: np.ndarray
    x: np.ndarray

    class Config:
        arbitrary_types_allowed = True

    @model_validator(mode="after")
    def _check_shapes(self) -> "SampleSet":
        if self.phi.shape != self.x.shape or self.phi.ndim != 1:
            raise ValueError("phi and x must be 1-D arrays of equal length")
        return self

    @classmethod
    def from_arrays(cls, phi: Any, x: Any) -> "SampleSet":
        phases, values = normalize_phase(np.asarray(phi, dtype=float), np.asarray(x, dtype=float))
        return cls(phi=phases, x=values)

    def __len__(self) -> int:
        return int(self.x.shape[0])

    def subset(self, index: Any) -> "SampleSet":
        return SampleSet(phi=self.phi[index], x=self.x[index])


# ==================== Estimate Schemas ====================

class Diagnostics(BaseModel):
    """Normality diagnostics attached to an estimate."""
    chi2_pvalue: Optional[float] = Field(default=None, ge=0, le=1)
    block_count: int = Field(default=0, ge=0)


class EstimateWithError(BaseModel):
    """Sample mean of an estimator with its error bar."""
    mean: ComplexNumber
    std_error: float = Field(..., ge=0)
    std_error_re: float = Field(default=0.0, ge=0)
    std_error_im: float = Field(default=0.0, ge=0)
    sample_count: int = Field(..., ge=0)
    diagnostics: Diagnostics = Field(default_factory=Diagnostics)


class DensityMatrixEstimate(BaseModel):
    """Reconstructed density matrix with per-element error bars."""
    matrix: np.ndarray
    errors: np.ndarray
    eta: float
    N: int
    hermitized: bool = False
    method: str = "averaging"
    diagnostics: dict = Field(default_factory=dict)

    class Config:
        arbitrary_types_allowed = True

    @property
    def dim(self) -> int:
        return int(self.matrix.shape[0])

    def to_json_dict(self) -> dict:
        """Estimate JSON document."""
        return {
            "dim": self.dim,
            "eta": self.eta,
            "N": self.N,
            "method": self.method,
            "hermitized": self.hermitized,
            "rho": complex_pairs(self.matrix),
            "err": np.asarray(self.errors, dtype=float).tolist(),
            "diagnostics": self.diagnostics,
        }

    @classmethod
    def from_json_dict(cls, data: dict) -> "DensityMatrixEstimate":
        return cls(
            matrix=complex_from_pairs(data["rho"]),
            errors=np.asarray(data["err"], dtype=float),
            eta=float(data["eta"]),
            N=int(data["N"]),
            hermitized=bool(data.get("hermitized", False)),
            method=str(data.get("method", "averaging")),
            diagnostics=dict(data.get("diagnostics", {})),
        )


# ==================== Adaptive Schemas ====================

class NullTerm(BaseModel):
    """Null estimator x^k exp(sign i (k + 2 + 2n) phi)."""
    k: int = Field(..., ge=0)
    n: int = Field(..., ge=0)
    sign: Literal[1, -1] = 1

    @property
    def frequency(self) -> int:
        return self.k + 2 + 2 * self.n


class NullBasis(BaseModel):
    """Truncated family of null estimators."""
    terms: List[NullTerm] = Field(default_factory=list)
    max_k: int = Field(default=0, ge=0)
    max_n: int = Field(default=0, ge=0)

    @classmethod
    def build(cls, max_k: int, max_n: int, both_signs: bool = True) -> "NullBasis":
        """All terms with k <= max_k and n <= max_n."""
        signs = (1, -1) if both_signs else (1,)
        terms = [
            NullTerm(k=k, n=n, sign=s)
            for k in range(max_k + 1)
            for n in range(max_n + 1)
            for s in signs
        ]
        return cls(terms=terms, max_k=max_k, max_n=max_n)

    def __len__(self) -> int:
        return len(self.terms)


class CoefficientEntry(BaseModel):
    """Fitted coefficient of one null term."""
    k: int
    n: int
    sign: int
    c: ComplexNumber


class CoefficientReport(BaseModel):
    """Least-squares adaptation summary."""
    coefficients: List[CoefficientEntry] = Field(default_factory=list)
    mode: str = "split"
    fit_count: int = 0
    variance_base: float = 0.0
    variance_adapted: float = 0.0


# ==================== Maximum Likelihood Schemas ====================

class MLOptimizer(str, Enum):
    """Likelihood maximization backends."""
    EXPECTATION_MAXIMIZATION = "expectation-maximization"
    DOWNHILL_SIMPLEX = "downhill-simplex"
    PROJECTED_GRADIENT = "projected-gradient"


class CholeskyFactor(BaseModel):
    """Upper triangular T with real nonnegative diagonal; rho = T^dag T / Tr."""
    dim: int = Field(..., ge=1)
    T: np.ndarray

    class Config:
        arbitrary_types_allowed = True

    @model_validator(mode="after")
    def _check_form(self) -> "CholeskyFactor":
        T = self.T
        if T.shape != (self.dim, self.dim):
            raise ValueError("T shape does not match dim")
        if np.any(np.tril(T, -1) != 0):
            raise ValueError("T must be upper triangular")
        diag = np.diag(T)
        if np.any(diag.imag != 0) or np.any(diag.real < 0):
            raise ValueError("T must have a real nonnegative diagonal")
        return self


class MLConfig(BaseModel):
    """Maximum-likelihood run configuration."""
    dim: int = Field(..., ge=1)
    eta: float = Field(default=1.0, gt=0, le=1)
    optimizer: MLOptimizer = Field(default=MLOptimizer.EXPECTATION_MAXIMIZATION)
    max_iters: int = Field(default=5000, ge=1)
    tol: float = Field(default=1e-9, gt=0)
    patience: int = Field(default=5, ge=1)
    seed: int = Field(default=0)
    random_start: bool = Field(default=False)
    raise_on_failure: bool = Field(default=False)


class MLReport(BaseModel):
    """Convergence report of a likelihood maximization."""
    converged: bool
    iterations: int
    loglik: float
    stationarity_residual: float
    binned_residual: Optional[float] = None
    truncation: int
    optimizer: MLOptimizer


# ==================== Calibration Schemas ====================

class BipartiteState(BaseModel):
    """Two-mode state R on H_A (x) H_B, index order (a, b)."""
    dim_a: int = Field(..., ge=1)
    dim_b: int = Field(..., ge=1)
    matrix: np.ndarray

    class Config:
        arbitrary_types_allowed = True

    @model_validator(mode="after")
    def _check_invariants(self) -> "BipartiteState":
        size = self.dim_a * self.dim_b
        if self.matrix.shape != (size, size):
            raise ValueError("matrix shape does not match dim_a * dim_b")
        if abs(np.trace(self.matrix).real - 1.0) > 1e-10:
            raise ValueError("bipartite state trace differs from 1")
        hermitian = (self.matrix + self.matrix.conj().T) / 2
        if np.linalg.eigvalsh(hermitian)[0] < -1e-10:
            raise ValueError("bipartite state is not positive semidefinite")
        return self


class TwinBeam(BaseModel):
    """Twin beam sqrt(1 - |xi|^2) sum xi^m |m>|m>, truncated."""
    xi: ComplexNumber
    truncation: int = Field(..., ge=1)

    @field_validator("xi")
    @classmethod
    def _check_xi(cls, value: complex) -> complex:
        if abs(value) >= 1:
            raise ValueError("|xi| must be < 1")
        return value

    def coefficients(self) -> np.ndarray:
        """Amplitudes on |m>|m> for m < truncation (not renormalized)."""
        m = np.arange(self.truncation)
        return np.sqrt(1 - abs(self.xi) ** 2) * self.xi ** m

    def photon_weights(self) -> np.ndarray:
        """(1 - |xi|^2) |xi|^(2m) for m < truncation."""
        return np.abs(self.coefficients()) ** 2


class DiagonalPOVM(BaseModel):
    """P[n][m] = <m|Pi_n|m> for n <= n_max, m < dim; optional overflow row n > n_max."""
    n_max: int = Field(..., ge=0)
    dim: int = Field(..., ge=1)
    P: np.ndarray
    errors: Optional[np.ndarray] = None
    overflow: Optional[np.ndarray] = None
    method: str = "theory"
    config: dict = Field(default_factory=dict)

    class Config:
        arbitrary_types_allowed = True

    @model_validator(mode="after")
    def _check_shape(self) -> "DiagonalPOVM":
        if self.P.shape != (self.n_max + 1, self.dim):
            raise ValueError("P shape must be (n_max + 1, dim)")
        if self.errors is not None and self.errors.shape != self.P.shape:
            raise ValueError("errors shape must match P")
        if self.overflow is not None and self.overflow.shape != (self.dim,):
            raise ValueError("overflow row must have length dim")
        return self

    def completeness(self) -> np.ndarray:
        """Sum over outcomes (overflow included) for each m."""
        total = self.P.sum(axis=0)
        if self.overflow is not None:
            total = total + self.overflow
        return total

    def to_json_dict(self) -> dict:
        return {
            "n_max": self.n_max,
            "dim": self.dim,
            "P": np.asarray(self.P, dtype=float).tolist(),
            "err": None if self.errors is None else np.asarray(self.errors, dtype=float).tolist(),
            "overflow": None if self.overflow is None else np.asarray(self.overflow, dtype=float).tolist(),
            "method": self.method,
            "config": self.config,
        }

    @classmethod
    def from_json_dict(cls, data: dict) -> "DiagonalPOVM":
        return cls(
            n_max=int(data["n_max"]),
            dim=int(data["dim"]),
            P=np.asarray(data["P"], dtype=float),
            errors=None if data.get("err") is None else np.asarray(data["err"], dtype=float),
            overflow=None if data.get("overflow") is None else np.asarray(data["overflow"], dtype=float),
            method=str(data.get("method", "theory")),
            config=dict(data.get("config", {})),
        )


class JointRecordSet(BaseModel):
    """Joint records as parallel arrays."""
    n: np.ndarray
    phi: np.ndarray
    x: np.ndarray

    class Config:
        arbitrary_types_allowed = True

    @model_validator(mode="after")
    def _check_shapes(self) -> "JointRecordSet":
        if not (self.n.shape == self.phi.shape == self.x.shape) or self.n.ndim != 1:
            raise ValueError("n, phi and x must be 1-D arrays of equal length")
        if self.n.size and self.n.min() < 0:
            raise ValueError("photon counts must be >= 0")
        return self

    @classmethod
    def from_arrays(cls, n: Any, phi: Any, x: Any) -> "JointRecordSet":
        phases, values = normalize_phase(np.asarray(phi, dtype=float), np.asarray(x, dtype=float))
        return cls(n=np.asarray(n, dtype=np.int64), phi=phases, x=values)

    def __len__(self) -> int:
        return int(self.n.shape[0])

    def homodyne(self) -> SampleSet:
        return SampleSet(phi=self.phi, x=self.x)


class FaithfulnessReport(BaseModel):
    """Invertibility of the reshuffled partial transpose."""
    faithful: bool
    condition_number: float
    singular_values: List[float] = Field(default_factory=list)


# ==================== Run Configuration Schemas ====================

class Subcommand(str, Enum):
    """CLI workflows."""
    SIMULATE = "simulate"
    RECONSTRUCT = "reconstruct"
    CALIBRATE = "calibrate"
    KERNEL_TABLE = "kernel-table"
    PLOT = "plot"


class Method(str, Enum):
    """Reconstruction methods."""
    AVERAGING = "avg"
    MAXIMUM_LIKELIHOOD = "ml"


class OutputFormat(str, Enum):
    """Artifact formats."""
    CSV = "csv"
    BIN = "bin"
    JSON = "json"
    SVG = "svg"


class RunConfig(BaseModel):
    """Fully resolved CLI run, written to the sidecar JSON."""
    subcommand: Subcommand
    input: Optional[Path] = None
    out: Optional[Path] = None
    state: Optional[Path] = None
    dim: Optional[int] = Field(default=None, ge=1, le=64)
    eta: Optional[float] = Field(default=None, gt=0, le=1)
    eta_h: float = Field(default=0.9, gt=0, le=1)
    xi: Optional[float] = Field(default=None, ge=0, lt=1)
    nbar: float = Field(default=0.0, ge=0)
    n: Optional[int] = Field(default=None, ge=1)
    n_max: int = Field(default=4, ge=0)
    seed: int = Field(default=0, ge=0)
    method: Method = Method.AVERAGING
    adaptive: bool = False
    bootstrap: Optional[int] = Field(default=None, ge=20)
    format: Optional[OutputFormat] = None
    jobs: Optional[int] = Field(default=None, ge=1)
    hermitize: bool = False
    x_grid: str = Field(default="-3:3:13")
    phi_grid: str = Field(default="0:0:1")

    @model_validator(mode="after")
    def _check_paths(self) -> "RunConfig":
        needs_input = {Subcommand.RECONSTRUCT, Subcommand.CALIBRATE, Subcommand.PLOT}
        if self.subcommand in needs_input:
            if self.input is None:
                raise ValueError(f"{self.subcommand.value} requires an input file")
            if not self.input.exists():
                raise ValueError(f"input file not found: {self.input}")
        if self.state is not None and not self.state.exists():
            raise ValueError(f"state file not found: {self.state}")
        if self.subcommand == Subcommand.SIMULATE and self.n is None:
            raise ValueError("simulate requires --n")
        return self

    @property
    def detector_eta(self) -> float:
        """--eta, or a perfect detector when it was not given."""
        return 1.0 if self.eta is None else self.eta
