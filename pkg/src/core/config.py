"""
Configuration settings for the EP-ABC engine.
"""

import os
from typing import Optional

from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    """Process-level settings loaded from environment variables."""

    # Application
    APP_NAME: str = "epabc"
    APP_VERSION: str = "1.0.0"
    LOG_LEVEL: str = "INFO"

    # Block-parallel scheduler worker cap (EPABC_MAX_WORKERS)
    MAX_WORKERS: Optional[int] = None

    # Rejection-ABC sampling
    ABC_BATCH_SIZE: int = 1024
    QMC_BURN_IN: int = 64

    # Correlation-matrix jitter ladder
    JITTER_START: float = 1e-10
    JITTER_MAX: float = 1e-6
    CHOLESKY_CACHE_SIZE: int = 4096

    # Max-stable truncation defaults
    SPIKE_CAP: int = 10_000
    TAIL_FACTOR: float = 5.0

    model_config = SettingsConfigDict(
        env_prefix="EPABC_",
        env_file=".env",
        env_file_encoding="utf-8",
        case_sensitive=True,
        extra="ignore",
    )

    @property
    def worker_count(self) -> int:
        """Number of threads the block-parallel scheduler may use."""
        if self.MAX_WORKERS is not None and self.MAX_WORKERS > 0:
            return self.MAX_WORKERS
        return os.cpu_count() or 1


# Global settings instance
settings = Settings()
