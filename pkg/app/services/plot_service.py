"""
SVG rendering of estimates and POVMs from jinja2 templates.
"""
import logging
from functools import lru_cache
from pathlib import Path
from typing import Sequence

import numpy as np
from jinja2 import Environment, FileSystemLoader, select_autoescape

from app.core.errors import InvalidInput
from app.schemas.schemas import DensityMatrixEstimate, DiagonalPOVM

logger = logging.getLogger(__name__)

templates_path = Path(__file__).parent.parent / "templates"

WIDTH = 640
HEIGHT = 360
MARGIN = {"left": 56, "right": 16, "top": 36, "bottom": 44}


def _fmt(value: float) -> str:
    return f"{value:.2f}"


class PlotService:
    """Service for self-contained SVG plots."""

    def __init__(self):
        self.env = Environment(
            loader=FileSystemLoader(str(templates_path)),
            autoescape=select_autoescape(["svg"]),
            trim_blocks=True,
        )

    # ==================== Bar charts ====================

    def render_bars(
        self,
        title: str,
        labels: Sequence[str],
        values: Sequence[float],
        errors: Sequence[float] | None = None,
        theory: Sequence[float] | None = None,
        xlabel: str = "",
    ) -> str:
        """Bar chart with optional error bars and a dashed theory curve."""
        values = np.asarray(values, dtype=float)
        if values.size == 0:
            raise InvalidInput("No hay valores para graficar")
        errors = None if errors is None else np.asarray(errors, dtype=float)
        theory = None if theory is None else np.asarray(theory, dtype=float)

        low = values - (errors if errors is not None else 0.0)
        high = values + (errors if errors is not None else 0.0)
        y_min = min(0.0, float(low.min()), float(theory.min()) if theory is not None else 0.0)
        y_max = max(float(high.max()), float(theory.max()) if theory is not None else 0.0)
        if y_max <= y_min:
            y_max = y_min + 1.0
        y_max += 0.08 * (y_max - y_min)

        left, right = MARGIN["left"], WIDTH - MARGIN["right"]
        top, bottom = MARGIN["top"], HEIGHT - MARGIN["bottom"]

        def y_of(v: float) -> float:
            return bottom - (v - y_min) / (y_max - y_min) * (bottom - top)

        slot = (right - left) / values.size
        baseline = y_of(0.0)
        bars = []
        for i, value in enumerate(values):
            center = left + slot * (i + 0.5)
            y_value = y_of(value)
            bars.append({
                "x": _fmt(center - 0.35 * slot),
                "width": _fmt(0.7 * slot),
                "y": _fmt(min(y_value, baseline)),
                "height": _fmt(abs(baseline - y_value)),
                "center": center,
                "label": labels[i],
                "error": None if errors is None else {
                    "low": _fmt(y_of(value - errors[i])),
                    "high": _fmt(y_of(value + errors[i])),
                },
            })

        theory_points = None
        if theory is not None:
            theory_points = " ".join(
                f"{_fmt(left + slot * (i + 0.5))},{_fmt(y_of(v))}" for i, v in enumerate(theory)
            )
        ticks = [
            {"y": _fmt(y_of(v)), "text_y": _fmt(y_of(v) + 4), "label": f"{v:.3g}"}
            for v in np.linspace(y_min, y_max, 5)
        ]
        template = self.env.get_template("bars.svg")
        return template.render(
            title=title,
            width=WIDTH,
            height=HEIGHT,
            left=left,
            right=right,
            top=top,
            bottom=bottom,
            baseline=_fmt(baseline),
            bars=bars,
            ticks=ticks,
            theory=theory_points,
            xlabel=xlabel,
        )

    def render_estimate(self, estimate: DensityMatrixEstimate, theory: Sequence[float] | None = None) -> str:
        """Photon-number distribution (diagonal of the estimate) with bars."""
        diagonal = np.diag(estimate.matrix).real
        errors = np.diag(estimate.errors)
        has_errors = bool(np.any(errors > 0))
        title = f"Diagonal de rho ({estimate.method}, N={estimate.N}, eta={estimate.eta:g})"
        return self.render_bars(
            title,
            [str(m) for m in range(estimate.dim)],
            diagonal,
            errors if has_errors else None,
            theory,
            xlabel="m",
        )

    def render_povm_outcome(self, povm: DiagonalPOVM, n: int, theory: DiagonalPOVM | None = None) -> str:
        """<m|Pi_n|m> against m for one outcome n."""
        if not 0 <= n <= povm.n_max:
            raise InvalidInput(f"Resultado n={n} fuera de 0..{povm.n_max}")
        reference = None
        if theory is not None:
            reference = theory.P[n, : povm.dim] if n <= theory.n_max else None
        return self.render_bars(
            f"POVM n={n} ({povm.method})",
            [str(m) for m in range(povm.dim)],
            povm.P[n],
            None if povm.errors is None else povm.errors[n],
            reference,
            xlabel="m",
        )

    # ==================== Heat maps ====================

    def render_povm_heatmap(self, povm: DiagonalPOVM, theory: DiagonalPOVM | None = None) -> str:
        """P[n][m] as a heat map, next to the theory table when given."""
        tables = [(povm.method, povm.P)]
        if theory is not None:
            rows = min(povm.n_max, theory.n_max) + 1
            cols = min(povm.dim, theory.dim)
            tables = [(povm.method, povm.P[:rows, :cols]), (theory.method, theory.P[:rows, :cols])]
        rows, cols = tables[0][1].shape
        cell = max(6.0, min(28.0, (WIDTH - 80) / (len(tables) * cols + 2)))
        panels = []
        for index, (label, table) in enumerate(tables):
            panel_width = cell * cols
            panels.append({
                "label": label,
                "x": _fmt(40 + index * (panel_width + 40)),
                "y": 44,
                "width": panel_width,
                "height": cell * rows,
                "cells": [
                    {
                        "x": _fmt(m * cell),
                        "y": _fmt(n * cell),
                        "size": _fmt(cell),
                        "n": n,
                        "m": m,
                        "value": f"{table[n, m]:.4g}",
                        "color": self._color(table[n, m]),
                    }
                    for n in range(rows)
                    for m in range(cols)
                ],
                "rows": [{"y": _fmt(n * cell + cell * 0.65), "label": n} for n in range(rows)],
                "columns": [{"x": _fmt(m * cell + cell / 2), "label": m} for m in range(cols)],
            })
        width = int(80 + len(tables) * (cell * cols + 40))
        height = int(44 + cell * rows + 40)
        template = self.env.get_template("heatmap.svg")
        return template.render(title="POVM diagonal P[n][m]", width=width, height=height, panels=panels)

    def _color(self, value: float) -> str:
        """White (0) to dark blue (1), clipped."""
        level = float(np.clip(value, 0.0, 1.0))
        r = int(round(255 * (1 - 0.85 * level)))
        g = int(round(255 * (1 - 0.6 * level)))
        return f"#{r:02x}{g:02x}ff"


@lru_cache()
def get_plot_service() -> PlotService:
    """Get cached plot service instance."""
    return PlotService()
