"""
Application configuration using Pydantic Settings.
Loads configuration from HOMTOM_* environment variables and .env file.
"""
import logging
import os
from functools import lru_cache
from pydantic_settings import BaseSettings
from pydantic import Field


class Settings(BaseSettings):
    """Toolkit settings loaded from environment variables."""

    # Application
    app_name: str = Field(default="homtom")
    app_version: str = Field(default="1.0.0")

    # Logging
    log: str = Field(default="INFO")
    log_format: str = Field(default="%(asctime)s %(levelname)s %(name)s: %(message)s")

    # Parallelism
    jobs: int | None = Field(default=None)  # None = available cores
    chunk_size: int = Field(default=65536)  # fixed work unit, independent of jobs

    # Sampling grid
    pdf_grid_points: int = Field(default=4096)
    pdf_grid_margin: float = Field(default=5.0)

    # Kernels
    kernel_cache_size: int = Field(default=65536)

    # Averaging diagnostics
    chi2_min_bins: int = Field(default=8)
    chi2_default_blocks: int = Field(default=100)
    bootstrap_resamples: int = Field(default=50)

    # Adaptive tomography
    adaptive_max_k: int = Field(default=4)
    adaptive_max_n: int = Field(default=3)
    adaptive_ridge: float = Field(default=1e-10)

    # Maximum likelihood
    ml_tol: float = Field(default=1e-9)
    ml_max_iters: int = Field(default=5000)
    ml_patience: int = Field(default=5)

    # Calibration
    calibration_mass: float = Field(default=0.999)

    @property
    def resolved_jobs(self) -> int:
        """Worker count, defaulting to the available cores."""
        if self.jobs is not None and self.jobs > 0:
            return self.jobs
        return os.cpu_count() or 1

    @property
    def log_level_value(self) -> int:
        """Numeric logging level for the configured name."""
        level = logging.getLevelName(self.log.strip().upper())
        return level if isinstance(level, int) else logging.INFO

    class Config:
        env_file = ".env"
        env_file_encoding = "utf-8"
        env_prefix = "HOMTOM_"
        case_sensitive = False
        extra = "ignore"  # Ignore extra environment variables not defined in Settings


@lru_cache()
def get_settings() -> Settings:
    """Get cached settings instance."""
    return Settings()
