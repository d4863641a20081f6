# Configuration principale de l'application DPLD
from pathlib import Path
from typing import Optional

from pydantic import Field, field_validator
from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    """Configuration de l'application (variables d'environnement préfixées PLD_)"""

    model_config = SettingsConfigDict(
        env_file=".env",
        env_prefix="PLD_",
        case_sensitive=False,
        extra="ignore",
    )

    # Configuration générale
    app_name: str = "DPLD - Débruitage partiellement linéaire"
    app_version: str = "1.0.0"
    log_level: str = Field(default="INFO")

    # Configuration stockage
    output_directory: str = Field(default="./runs")
    log_directory: str = Field(default="./logs")

    # Configuration calcul
    threads: Optional[int] = Field(default=None)
    default_seed: int = Field(default=0)

    # Configuration Monte-Carlo
    mc_chunk_size: int = Field(default=256)
    tolerance_se: float = Field(default=4.0)
    full_fit_max_pixels: int = Field(default=4096)
    ridge: float = Field(default=1e-8)

    @field_validator("threads")
    @classmethod
    def _threads_positive(cls, value: Optional[int]) -> Optional[int]:
        if value is not None and value < 1:
            raise ValueError("PLD_THREADS doit être ≥ 1")
        return value

    @field_validator("mc_chunk_size")
    @classmethod
    def _chunk_positive(cls, value: int) -> int:
        if value < 1:
            raise ValueError("mc_chunk_size doit être ≥ 1")
        return value


# Instance globale des paramètres
settings = Settings()


def ensure_directories(*extra: Path) -> None:
    """Création des répertoires nécessaires"""
    for directory in [settings.output_directory, settings.log_directory, *extra]:
        Path(directory).mkdir(parents=True, exist_ok=True)
