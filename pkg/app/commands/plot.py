"""
`plot`: re-render an estimate or POVM JSON as SVG.
"""
from pathlib import Path
from typing import List

from app.commands.artifacts import load_result, write_bytes
from app.schemas.schemas import DiagonalPOVM, RunConfig
from app.services.plot_service import get_plot_service


def register(subparsers, parent) -> None:
    parser = subparsers.add_parser(
        "plot",
        parents=[parent],
        help="Generar SVG a partir de un JSON de resultados",
    )
    parser.add_argument("input", type=Path, help="JSON de estimado o de POVM")
    parser.set_defaults(subcommand="plot")


def run(config: RunConfig) -> List[Path]:
    result = load_result(config.input)
    plots = get_plot_service()
    if isinstance(result, DiagonalPOVM):
        svg = plots.render_povm_heatmap(result)
    else:
        svg = plots.render_estimate(result)
    return [write_bytes(config.out, svg.encode("utf-8"))]
