"""
`simulate`: seeded homodyne samples of a state, or twin-beam joint records
when --xi is given.
"""
import logging
from pathlib import Path
from typing import List

from app.commands.artifacts import load_state, output_format, write_bytes
from app.core.errors import InvalidInput
from app.schemas.schemas import DetectorModel, OutputFormat, RunConfig
from app.services.binary_service import get_binary_service
from app.services.calibration_service import get_calibration_service
from app.services.csv_service import get_csv_service
from app.services.state_service import get_state_service

logger = logging.getLogger(__name__)


def register(subparsers, parent) -> None:
    parser = subparsers.add_parser(
        "simulate",
        parents=[parent],
        help="Simular datos homodinos (o registros conjuntos con --xi)",
    )
    parser.set_defaults(subcommand="simulate")


def run(config: RunConfig) -> List[Path]:
    """Write the sample file (csv or bin) or the joint-record CSV."""
    fmt = output_format(config, OutputFormat.CSV)
    if config.xi is not None:
        if fmt != OutputFormat.CSV:
            raise InvalidInput("Los registros conjuntos solo se escriben en CSV")
        records = get_calibration_service().simulate_joint(
            config.xi, config.detector_eta, config.nbar, config.eta_h, config.n, config.seed, config.dim, config.jobs
        )
        return [write_bytes(config.out, get_csv_service().write_joint_records(records))]

    if fmt not in (OutputFormat.CSV, OutputFormat.BIN):
        raise InvalidInput(f"Formato de muestras no soportado: {fmt.value}")
    state = load_state(config.state)
    samples = get_state_service().sample_quadratures(
        state, DetectorModel(eta=config.detector_eta), config.n, config.seed, config.jobs
    )
    logger.info("[SIMULATE] %d samples written to %s", len(samples), config.out)
    if fmt == OutputFormat.BIN:
        return [write_bytes(config.out, get_binary_service().write_samples(samples))]
    return [write_bytes(config.out, get_csv_service().write_samples(samples))]
