"""
`reconstruct`: density-matrix estimate from homodyne samples by kernel
averaging (optionally adaptive) or maximum likelihood.
"""
import logging
from pathlib import Path
from typing import List

import numpy as np

from app.commands.artifacts import json_path, load_samples, load_state, output_format, svg_path, write_bytes, write_json
from app.core.config import get_settings
from app.schemas.schemas import DensityMatrixEstimate, Method, MLConfig, OutputFormat, RunConfig, SampleSet
from app.services.adaptive_service import get_adaptive_service
from app.services.averaging_service import get_averaging_service
from app.services.kernel_service import get_kernel_service
from app.services.maxlik_service import get_maxlik_service
from app.services.plot_service import get_plot_service
from app.services.state_service import get_state_service

logger = logging.getLogger(__name__)


def register(subparsers, parent) -> None:
    parser = subparsers.add_parser(
        "reconstruct",
        parents=[parent],
        help="Reconstruir la matriz densidad a partir de muestras",
    )
    parser.add_argument("input", type=Path, help="Archivo de muestras (CSV phi,x o binario HOMTOM01)")
    parser.set_defaults(subcommand="reconstruct")


def run(config: RunConfig) -> List[Path]:
    samples = load_samples(config.input)
    averaging = get_averaging_service()
    dim = config.dim or averaging.suggest_truncation(samples, config.detector_eta)

    if config.method == Method.MAXIMUM_LIKELIHOOD:
        estimate = _maximum_likelihood(samples, config, dim)
    else:
        estimate = averaging.reconstruct_density_matrix(
            samples, dim, config.detector_eta, config.hermitize, config.jobs
        )
        if config.adaptive:
            estimate = _adapt(samples, config, estimate)
        if config.bootstrap:
            estimate.diagnostics["bootstrap_errors"] = _bootstrap_errors(samples, config, dim).tolist()

    artifacts = [write_json(json_path(config.out), estimate.to_json_dict())]
    if output_format(config, OutputFormat.JSON) == OutputFormat.SVG:
        theory = None
        if config.state is not None:
            truth = get_state_service().photon_statistics(load_state(config.state))
            theory = np.zeros(dim)
            theory[: min(dim, truth.size)] = truth[:dim]
        svg = get_plot_service().render_estimate(estimate, theory)
        artifacts.append(write_bytes(svg_path(config.out), svg.encode("utf-8")))
    return artifacts


def _maximum_likelihood(samples: SampleSet, config: RunConfig, dim: int) -> DensityMatrixEstimate:
    settings = get_settings()
    ml_config = MLConfig(
        dim=dim,
        eta=config.detector_eta,
        tol=settings.ml_tol,
        max_iters=settings.ml_max_iters,
        patience=settings.ml_patience,
        seed=config.seed,
        raise_on_failure=True,
    )
    maxlik = get_maxlik_service()
    estimate, _ = maxlik.ml_reconstruct(samples, ml_config)
    if config.bootstrap:
        estimate.errors = maxlik.ml_bootstrap(samples, ml_config, config.bootstrap, config.seed, config.jobs)
    return estimate


def _adapt(samples: SampleSet, config: RunConfig, estimate: DensityMatrixEstimate) -> DensityMatrixEstimate:
    """Replace each element by its split-sample adapted estimate."""
    adaptive = get_adaptive_service()
    kernels = get_kernel_service()
    matrix = estimate.matrix.copy()
    errors = estimate.errors.copy()
    reports = []
    for n in range(estimate.dim):
        for m in range(n, estimate.dim):
            result, report = adaptive.estimate_adaptive(
                samples, kernels.evaluator(n, m, config.detector_eta), jobs=config.jobs
            )
            matrix[n, m] = result.mean
            matrix[m, n] = np.conj(result.mean)
            errors[n, m] = errors[m, n] = result.std_error
            reports.append({"n": n, "m": m, **report.model_dump(mode="json")})
    if config.hermitize:
        matrix = get_averaging_service().project_physical(matrix)
    logger.info("[RECONSTRUCT] adaptive estimates for %d elements", len(reports))
    diagnostics = {**estimate.diagnostics, "adaptive": reports}
    update = {"matrix": matrix, "errors": errors, "method": "adaptive", "diagnostics": diagnostics}
    return estimate.model_copy(update=update)


def _bootstrap_errors(samples: SampleSet, config: RunConfig, dim: int) -> np.ndarray:
    averaging = get_averaging_service()
    kernels = get_kernel_service()
    errors = np.zeros((dim, dim))
    for n in range(dim):
        for m in range(n, dim):
            errors[n, m] = errors[m, n] = averaging.bootstrap_std(
                samples, kernels.evaluator(n, m, config.detector_eta), config.bootstrap, config.seed
            )
    return errors
