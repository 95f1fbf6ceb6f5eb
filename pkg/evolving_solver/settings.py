"""
Configuration settings for the solver using pydantic-settings

Environment variables are automatically loaded and take precedence over defaults.
Field names are automatically converted to uppercase for env var lookup:
- pot_seed → POT_SEED
- log_level → LOG_LEVEL
- sentry_dsn → SENTRY_DSN
etc.

Environment variables can be set:
1. Directly in the environment (highest priority)
2. In a .env file in the project root
3. As default values in the class (lowest priority)
"""

from pydantic_settings import BaseSettings, SettingsConfigDict


class SolverSettings(BaseSettings):
    """
    Process-level configuration with environment variable support.

    Experiment parameters (search budget, GRPO coefficients, ...) live in the
    YAML experiment config, not here. This only holds knobs that belong to the
    machine or the shell session running the experiment.
    Example: export POT_SEED=7
    """

    model_config = SettingsConfigDict(
        env_file=".env",
        env_file_encoding="utf-8",
        case_sensitive=False,  # Config dict keys are case-insensitive
        extra="ignore",  # Ignore extra fields from env vars
        env_ignore_empty=True,  # Ignore empty string env vars
    )

    # Default seed for every CLI subcommand (overridden by explicit --seed flags)
    pot_seed: int = 0

    log_level: str = "INFO"

    # Task-level worker pool; each worker owns its solve
    workers: int = 1
    # Intra-op threads per worker. Keep at 1 for bit-reproducible traces.
    torch_threads: int = 1

    snapshot_path: str = "artifacts/base.snapshot"

    # Sentry configuration (optional)
    sentry_dsn: str | None = None
    sentry_traces_sample_rate: float = 0.0  # Batch jobs, errors only by default
    sentry_send_default_pii: bool = False
    sentry_enable_logs: bool = True  # Enable sending logs to Sentry


# Global settings instance
settings = SolverSettings()
