"""
Command-line entry point.
"""
import argparse
import logging
import sys
from pathlib import Path
from typing import List, Sequence

from pydantic import ValidationError

from app.commands import COMMANDS
from app.commands.artifacts import read_json, sidecar_path, write_json
from app.core.config import get_settings
from app.core.errors import HomtomError
from app.core.logging import configure_logging
from app.schemas.schemas import RunConfig

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_IO = 4

CONFIG_FIELDS = (
    "input", "out", "state", "dim", "eta", "eta_h", "xi", "nbar", "n", "n_max", "seed",
    "method", "adaptive", "bootstrap", "format", "jobs", "hermitize", "x_grid", "phi_grid",
)


def build_parser() -> argparse.ArgumentParser:
    settings = get_settings()
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--state", type=Path, help="JSON del estado (vacío por defecto)")
    common.add_argument("--dim", type=int, help="Truncamiento de Fock d")
    common.add_argument("--eta", type=float, help="Eficiencia del detector homodino (o del detector calibrado)")
    common.add_argument("--eta-h", dest="eta_h", type=float, help="Eficiencia homodina en la calibración")
    common.add_argument("--xi", type=float, help="Parámetro del haz gemelo")
    common.add_argument("--nbar", type=float, help="Media de cuentas oscuras del detector simulado")
    common.add_argument("--n", type=int, help="Número de muestras")
    common.add_argument("--n-max", dest="n_max", type=int, help="Resultado máximo de la POVM")
    common.add_argument("--seed", type=int, help="Semilla")
    common.add_argument("--method", choices=["avg", "ml"], help="Método de reconstrucción")
    common.add_argument("--adaptive", action="store_true", default=None, help="Estimadores nulos adaptativos")
    common.add_argument("--bootstrap", type=int, help="Remuestreos bootstrap M")
    common.add_argument("--out", type=Path, required=True, help="Archivo de salida")
    common.add_argument("--format", choices=["csv", "bin", "json", "svg"], help="Formato de salida")
    common.add_argument("--jobs", type=int, help="Número de hilos")
    common.add_argument("--hermitize", action="store_true", default=None, help="Proyectar a matriz densidad física")
    common.add_argument("--x-grid", dest="x_grid", help="Rejilla x inicio:fin:puntos")
    common.add_argument("--phi-grid", dest="phi_grid", help="Rejilla phi inicio:fin:puntos")

    parser = argparse.ArgumentParser(
        prog=settings.app_name,
        description="Tomografía homodina: simulación, reconstrucción y calibración de detectores.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {settings.app_version}")
    parser.add_argument("--config", type=Path, help="Repetir una ejecución desde su JSON <out>.run.json")
    subparsers = parser.add_subparsers(dest="subcommand")
    for command in COMMANDS.values():
        command.register(subparsers, common)
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """RunConfig from a sidecar (--config) or from the parsed flags."""
    if args.config is not None:
        return RunConfig.model_validate(read_json(args.config)["config"])
    values = {name: getattr(args, name, None) for name in CONFIG_FIELDS}
    values = {k: v for k, v in values.items() if v is not None}
    return RunConfig(subcommand=args.subcommand, **values)


def run(config: RunConfig) -> List[Path]:
    """Execute one resolved run and write its sidecar."""
    settings = get_settings()
    logger.info("[START] %s seed=%d", config.subcommand.value, config.seed)
    artifacts = COMMANDS[config.subcommand.value].run(config)
    write_json(sidecar_path(config.out), {
        "app": settings.app_name,
        "version": settings.app_version,
        "seed": config.seed,
        "config": config.model_dump(mode="json"),
        "artifacts": [str(path) for path in artifacts],
    })
    for path in artifacts:
        logger.info("[DONE] %s", path)
    return artifacts


def main(argv: Sequence[str] | None = None) -> int:
    configure_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.subcommand is None and args.config is None:
        parser.print_help(sys.stderr)
        return EXIT_VALIDATION

    try:
        config = resolve_config(args)
    except ValidationError as e:
        print(f"Configuración inválida: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except HomtomError as e:
        print(e.detail, file=sys.stderr)
        return e.exit_code
    except (OSError, KeyError) as e:
        print(f"No se pudo leer la configuración: {e}", file=sys.stderr)
        return EXIT_IO

    try:
        run(config)
    except HomtomError as e:
        print(e.detail, file=sys.stderr)
        return e.exit_code
    except OSError as e:
        print(f"Error de E/S: {e}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
