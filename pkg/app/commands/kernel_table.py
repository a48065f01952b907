"""
`kernel-table`: Fock kernels K_nm(x, phi) on a grid, as CSV.
"""
from pathlib import Path
from typing import List

from app.commands.artifacts import parse_grid, write_bytes
from app.schemas.schemas import RunConfig
from app.services.csv_service import get_csv_service
from app.services.kernel_service import get_kernel_service

DEFAULT_DIM = 4


def register(subparsers, parent) -> None:
    parser = subparsers.add_parser(
        "kernel-table",
        parents=[parent],
        help="Tabular los núcleos de Fock en una rejilla (x, phi)",
    )
    parser.set_defaults(subcommand="kernel-table")


def run(config: RunConfig) -> List[Path]:
    rows = get_kernel_service().kernel_table(
        config.dim or DEFAULT_DIM,
        config.detector_eta,
        parse_grid(config.x_grid),
        parse_grid(config.phi_grid),
    )
    return [write_bytes(config.out, get_csv_service().write_kernel_table(rows))]
