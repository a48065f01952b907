"""
Tests for the SVG plot service.
"""
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from app.core.errors import InvalidInput
from app.schemas.schemas import DensityMatrixEstimate, DiagonalPOVM
from app.services.plot_service import PlotService, get_plot_service

SVG = "{http://www.w3.org/2000/svg}"


def _elements(svg: str, tag: str, css_class: str) -> list:
    root = ET.fromstring(svg)
    return [e for e in root.iter(f"{SVG}{tag}") if e.get("class") == css_class]


class TestPlotService:
    """Test cases for PlotService class."""

    def setup_method(self):
        """Set up test fixtures."""
        self.plot_service = PlotService()
        self.povm = DiagonalPOVM(
            n_max=1,
            dim=3,
            P=np.array([[1.0, 0.2, 0.04], [0.0, 0.8, 0.32]]),
            errors=np.full((2, 3), 0.01),
            method="averaging",
        )

    # ==================== Bar chart tests ====================

    def test_render_bars(self):
        """Test one bar and one error bar per value, and a dashed theory curve."""
        svg = self.plot_service.render_bars(
            "Prueba", ["0", "1", "2"], [0.5, 0.3, -0.1], errors=[0.05, 0.05, 0.05], theory=[0.5, 0.3, 0.2]
        )

        assert len(_elements(svg, "rect", "bar")) == 3
        assert len(_elements(svg, "line", "error")) == 3
        theory = _elements(svg, "polyline", "theory")
        assert len(theory) == 1
        assert theory[0].get("stroke-dasharray") == "6,4"
        assert len(theory[0].get("points").split()) == 3

    def test_render_bars_without_extras(self):
        """Test that errors and theory are optional."""
        svg = self.plot_service.render_bars("Sin extras", ["a"], [1.0])

        assert len(_elements(svg, "rect", "bar")) == 1
        assert _elements(svg, "line", "error") == []
        assert _elements(svg, "polyline", "theory") == []

    def test_render_bars_escapes_title(self):
        """Test that the title is escaped."""
        svg = self.plot_service.render_bars("p<n> & m", ["0"], [1.0])

        assert "p&lt;n&gt; &amp; m" in svg
        assert ET.fromstring(svg).find(f"{SVG}title").text == "p<n> & m"

    def test_render_bars_empty_raises(self):
        """Test that an empty series is rejected."""
        with pytest.raises(InvalidInput):
            self.plot_service.render_bars("Vacío", [], [])

    def test_render_estimate(self):
        """Test the estimate chart shows the diagonal with its error bars."""
        estimate = DensityMatrixEstimate(
            matrix=np.diag([0.7, 0.2, 0.1]).astype(complex),
            errors=np.full((3, 3), 0.01),
            eta=0.9,
            N=1000,
        )
        svg = self.plot_service.render_estimate(estimate, theory=[0.7, 0.2, 0.1])

        assert len(_elements(svg, "rect", "bar")) == 3
        assert len(_elements(svg, "line", "error")) == 3
        assert "N=1000" in svg

    def test_render_estimate_without_errors(self):
        """Test that ML estimates without bootstrap have no error bars."""
        estimate = DensityMatrixEstimate(
            matrix=np.diag([0.6, 0.4]).astype(complex), errors=np.zeros((2, 2)), eta=1.0, N=50, method="ml"
        )
        svg = self.plot_service.render_estimate(estimate)

        assert _elements(svg, "line", "error") == []

    # ==================== POVM tests ====================

    def test_render_povm_outcome(self):
        """Test one chart per outcome against the theory row."""
        svg = self.plot_service.render_povm_outcome(self.povm, 1, theory=self.povm)

        assert len(_elements(svg, "rect", "bar")) == 3
        assert len(_elements(svg, "polyline", "theory")) == 1
        assert "POVM n=1" in svg

    def test_render_povm_outcome_out_of_range(self):
        """Test that outcomes above n_max are rejected."""
        with pytest.raises(InvalidInput):
            self.plot_service.render_povm_outcome(self.povm, 2)

    def test_render_povm_heatmap(self):
        """Test one cell per table entry."""
        svg = self.plot_service.render_povm_heatmap(self.povm)

        assert len(_elements(svg, "rect", "cell")) == 6
        assert len(_elements(svg, "g", "panel")) == 1

    def test_render_povm_heatmap_with_theory(self):
        """Test that the theory table is drawn as a second panel."""
        svg = self.plot_service.render_povm_heatmap(self.povm, theory=self.povm)

        assert len(_elements(svg, "g", "panel")) == 2
        assert len(_elements(svg, "rect", "cell")) == 12

    def test_color_scale(self):
        """Test the white to blue scale and clipping."""
        assert self.plot_service._color(0.0) == "#ffffff"
        assert self.plot_service._color(1.0) == "#2666ff"
        assert self.plot_service._color(3.0) == self.plot_service._color(1.0)

    def test_get_plot_service_returns_cached_instance(self):
        """Test that get_plot_service returns the same instance."""
        assert get_plot_service() is get_plot_service()
