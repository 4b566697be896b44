from pydantic_settings import BaseSettings, SettingsConfigDict
from typing import Optional


class Settings(BaseSettings):
    # Reproducibility
    seed: Optional[int] = None  # REALIGN_SEED overrides the experiment seed
    torch_threads: int = 1
    rollout_workers: int = 4

    # Output
    output_directory: str = "runs"
    log_level: str = "INFO"
    progress: bool = True

    # Project
    project_name: str = "ReAlign"
    version: str = "0.1.0"

    model_config = SettingsConfigDict(env_prefix="REALIGN_", env_file=".env", extra="ignore")


settings = Settings()
