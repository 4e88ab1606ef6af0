"""
Configuration management for the ICL geometry lab
"""

from functools import lru_cache
from pathlib import Path
from typing import Optional

from pydantic import field_validator
from pydantic_settings import BaseSettings, SettingsConfigDict


LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL")


class Settings(BaseSettings):
    """Process settings with environment variable support (prefix ICL_LAB_)"""

    model_config = SettingsConfigDict(
        env_prefix="ICL_LAB_",
        env_file=".env",
        env_file_encoding="utf-8",
        case_sensitive=False,
    )

    # Where run directories are created
    output_root: str = "runs"

    # Logging Configuration
    log_level: str = "INFO"
    log_file: Optional[str] = None

    # Parallelism for independent stages (Monte-Carlo grid, saliency)
    max_workers: int = 4

    # Forward passes are chunked to bound memory
    eval_batch_size: int = 64

    # Hidden-state dumps default to single precision
    dump_dtype: str = "f32"

    @field_validator("log_level")
    @classmethod
    def validate_log_level(cls, v):
        v = v.upper()
        if v not in LOG_LEVELS:
            raise ValueError(f"log_level must be one of {', '.join(LOG_LEVELS)}")
        return v

    @field_validator("max_workers", "eval_batch_size")
    @classmethod
    def validate_positive(cls, v):
        if v < 1:
            raise ValueError("must be >= 1")
        return v

    @field_validator("dump_dtype")
    @classmethod
    def validate_dump_dtype(cls, v):
        if v not in ("f32", "f64"):
            raise ValueError("dump_dtype must be f32 or f64")
        return v

    @property
    def output_root_path(self) -> Path:
        return Path(self.output_root)


@lru_cache()
def get_settings() -> Settings:
    """Get cached settings instance"""
    return Settings()
