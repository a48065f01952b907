"""
`calibrate`: diagonal POVM of the detector from twin-beam joint records.
"""
import logging
from pathlib import Path
from typing import List

from app.commands.artifacts import json_path, output_format, svg_path, write_bytes, write_json
from app.core.config import get_settings
from app.core.errors import InvalidInput
from app.schemas.schemas import Method, MLConfig, OutputFormat, RunConfig
from app.services.calibration_service import get_calibration_service
from app.services.csv_service import get_csv_service
from app.services.plot_service import get_plot_service

logger = logging.getLogger(__name__)


def register(subparsers, parent) -> None:
    parser = subparsers.add_parser(
        "calibrate",
        parents=[parent],
        help="Calibrar un detector a partir de registros conjuntos n,phi,x",
    )
    parser.add_argument("input", type=Path, help="CSV de registros conjuntos")
    parser.set_defaults(subcommand="calibrate")


def run(config: RunConfig) -> List[Path]:
    """
    Writes the POVM JSON; with --format svg also one bar chart per outcome
    and a heat map. The theoretical POVM for --eta and --nbar is overlaid
    only when --eta is given.
    """
    if config.xi is None:
        raise InvalidInput("calibrate requiere --xi")
    records = get_csv_service().read_joint_records(config.input.read_bytes())
    calibration = get_calibration_service()
    dim = config.dim or calibration.default_truncation(config.xi)

    if config.method == Method.MAXIMUM_LIKELIHOOD:
        settings = get_settings()
        ml_config = MLConfig(
            dim=dim,
            eta=config.eta_h,
            tol=settings.ml_tol,
            max_iters=settings.ml_max_iters,
            patience=settings.ml_patience,
            seed=config.seed,
            raise_on_failure=True,
        )
        povm, _ = calibration.calibrate_ml(
            records, config.xi, config.eta_h, config.n_max, dim,
            config=ml_config, bootstrap=config.bootstrap, jobs=config.jobs,
        )
    else:
        povm = calibration.calibrate_averaging(records, config.xi, config.eta_h, config.n_max, dim, config.jobs)

    artifacts = [write_json(json_path(config.out), povm.to_json_dict())]
    if output_format(config, OutputFormat.JSON) == OutputFormat.SVG:
        theory = None
        if config.eta is not None:
            theory = calibration.theoretical_table(config.eta, config.nbar, config.n_max, dim)
        plots = get_plot_service()
        for n in range(povm.n_max + 1):
            svg = plots.render_povm_outcome(povm, n, theory)
            artifacts.append(write_bytes(svg_path(config.out, f".n{n}"), svg.encode("utf-8")))
        heatmap = plots.render_povm_heatmap(povm, theory)
        artifacts.append(write_bytes(svg_path(config.out, ".heatmap"), heatmap.encode("utf-8")))
    logger.info("[CALIBRATE] %d artifacts written", len(artifacts))
    return artifacts
