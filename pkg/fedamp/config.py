"""
Configurações de runtime do fedamp.

Valores lidos de variáveis de ambiente com prefixo FEDAMP_ e do arquivo .env.
A configuração de cada experimento fica no arquivo INI (ver fedamp.api.schemas).
"""
from functools import lru_cache
from pathlib import Path

from pydantic import Field, field_validator
from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    """
    Classe de configurações centralizadas
    """

    model_config = SettingsConfigDict(
        env_prefix="FEDAMP_",
        env_file=".env",
        env_file_encoding="utf-8",
        extra="ignore",
    )

    # Ambiente
    environment: str = "development"

    # Logging
    log_level: str = "INFO"
    log_json: bool = True

    # Execução
    workers: int = Field(1, ge=1, description="Threads para atualizações locais e Monte Carlo")
    output_dir: Path = Path("out")
    divergence_threshold: float = Field(
        1e100, gt=0, description="Norma de x acima da qual a execução é abortada"
    )
    progress: bool = False

    @field_validator("log_level")
    @classmethod
    def _upper_level(cls, value: str) -> str:
        value = value.upper()
        if value not in {"DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"}:
            raise ValueError(f"nível de log desconhecido: {value}")
        return value

    @property
    def is_test(self) -> bool:
        return self.environment == "test"


@lru_cache(maxsize=1)
def get_settings() -> Settings:
    """
    Retorna a instância única de configurações (cache; limpar com get_settings.cache_clear()).
    """
    return Settings()
