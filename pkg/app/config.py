from pydantic_settings import BaseSettings, SettingsConfigDict
from functools import lru_cache
from typing import List


class Settings(BaseSettings):
    """
    Configurações do laboratório carregadas do ambiente / .env
    """

    # Project
    PROJECT_NAME: str = "CPE Transformer Lab"
    VERSION: str = "1.0.0"
    DEBUG: bool = False

    # Logging
    LOG_LEVEL: str = "INFO"
    LOG_FORMAT: str = "text"  # text | json
    LOG_FILE: str = ""

    # Saída dos experimentos
    OUTPUT_DIR: str = "out"

    # Model core
    SCORE_CLAMP: float = 80.0
    LAYER_NORM_EPS: float = 1e-5
    ROTARY_MAX_OFFSET: int = 512
    ROTARY_BASE: float = 10000.0

    # Constructive models
    DEFAULT_ETA: float = 0.1
    DEFAULT_SHARPNESS: float = 20.0
    VERIFY_TOLERANCE: float = 1e-12

    # Avaliação local: limite de células B*n*n por chunk
    EVAL_CHUNK_ELEMENTS: int = 2 ** 24

    # Remote endpoint defaults
    REMOTE_TIMEOUT: float = 60.0
    REMOTE_MAX_RETRIES: int = 5
    REMOTE_TOP_K: int = 20
    REMOTE_MAX_IN_FLIGHT: int = 4
    REMOTE_BACKOFF_SECONDS: float = 0.5
    REMOTE_BACKOFF_MAX_SECONDS: float = 30.0

    # Mock server
    MOCK_API_KEYS: str = ""  # separado por vírgula
    MOCK_HOST: str = "127.0.0.1"
    MOCK_PORT: int = 8000
    MOCK_RATE_LIMIT_PER_MINUTE: int = 0  # 0 desliga o limiter
    API_V1_PREFIX: str = "/v1"
    CORS_ORIGINS: str = "http://localhost:3000"

    model_config = SettingsConfigDict(env_file=".env", case_sensitive=True, extra="ignore")

    @property
    def mock_api_keys_list(self) -> List[str]:
        """Converte string de API keys do mock em lista"""
        if not self.MOCK_API_KEYS:
            return []
        return [key.strip() for key in self.MOCK_API_KEYS.split(",") if key.strip()]

    @property
    def cors_origins_list(self) -> List[str]:
        """Converte string de CORS origins em lista"""
        return [origin.strip() for origin in self.CORS_ORIGINS.split(",")]


@lru_cache()
def get_settings() -> Settings:
    """
    Singleton: carrega settings apenas uma vez
    e cacheia para uso em todo o pacote
    """
    return Settings()
