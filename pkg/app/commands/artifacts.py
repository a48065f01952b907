"""
Reading and writing run artifacts.
"""
import json
from pathlib import Path
from typing import Any

import numpy as np

from app.core.errors import FileFormatError, InvalidInput
from app.schemas.schemas import DensityMatrixEstimate, DiagonalPOVM, FockStateSpec, OutputFormat, RunConfig, SampleSet
from app.services.binary_service import get_binary_service
from app.services.csv_service import get_csv_service
from app.services.state_service import StateLike, get_state_service


def write_bytes(path: Path, data: bytes) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(data)
    return path


def write_json(path: Path, document: Any) -> Path:
    text = json.dumps(document, indent=2, sort_keys=False)
    return write_bytes(path, (text + "\n").encode("utf-8"))


def read_json(path: Path) -> dict:
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise FileFormatError(f"JSON inválido en {path}: {e}") from e


def sidecar_path(out: Path) -> Path:
    """<out>.run.json"""
    return out.with_name(out.name + ".run.json")


def json_path(out: Path) -> Path:
    """Result JSON path; an .svg output name keeps its stem and gets .json."""
    if out.suffix.lower() == ".svg":
        return out.with_suffix(".json")
    return out


def svg_path(out: Path, suffix: str = "") -> Path:
    return out.with_name(f"{out.stem}{suffix}.svg")


def output_format(config: RunConfig, default: OutputFormat) -> OutputFormat:
    """Explicit --format, else the output suffix, else the default."""
    if config.format is not None:
        return config.format
    if config.out is not None:
        suffix = config.out.suffix.lstrip(".").lower()
        for fmt in OutputFormat:
            if fmt.value == suffix:
                return fmt
    return default


def load_samples(path: Path) -> SampleSet:
    """CSV or HOMTOM01 binary, told apart by the magic bytes."""
    content = path.read_bytes()
    binary = get_binary_service()
    if binary.is_binary(content):
        return binary.read_samples(content)
    return get_csv_service().read_samples(content)


def load_state(path: Path | None) -> StateLike:
    """State JSON file, vacuum when no file is given."""
    if path is None:
        return FockStateSpec(n=0)
    return get_state_service().parse_state(path.read_bytes())


def load_result(path: Path) -> DensityMatrixEstimate | DiagonalPOVM:
    """Estimate JSON (has "rho") or POVM JSON (has "P")."""
    data = read_json(path)
    try:
        if "rho" in data:
            return DensityMatrixEstimate.from_json_dict(data)
        if "P" in data:
            return DiagonalPOVM.from_json_dict(data)
    except (KeyError, ValueError, TypeError) as e:
        raise FileFormatError(f"Resultado inválido en {path}: {e}") from e
    raise FileFormatError(f"{path} no es un estimado ni una POVM")


def parse_grid(spec: str) -> np.ndarray:
    """`start:stop:count` -> linspace."""
    try:
        start, stop, count = spec.split(":")
        count = int(count)
        if count < 1:
            raise ValueError("count < 1")
        return np.linspace(float(start), float(stop), count)
    except ValueError as e:
        raise InvalidInput(f"Rejilla inválida '{spec}' (formato inicio:fin:puntos): {e}") from e
