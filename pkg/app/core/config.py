from typing import List, Optional, Union
from pydantic import AnyHttpUrl, field_validator
from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    API_V1_STR: str = "/api/v1"
    PROJECT_NAME: str = "Point Cloud Homogenization Lab"

    # CORS
    # Union[List, str] so a comma-separated string in .env parses
    BACKEND_CORS_ORIGINS: Union[List[AnyHttpUrl], str] = []

    @field_validator("BACKEND_CORS_ORIGINS", mode="before")
    @classmethod
    def assemble_cors_origins(cls, v: Union[str, List[str]]) -> Union[List[str], str]:
        if isinstance(v, str) and not v.startswith("["):
            return [i.strip() for i in v.split(",") if i.strip()]
        elif isinstance(v, (list, str)):
            return v
        raise ValueError(v)

    LOG_LEVEL: str = "INFO"

    # Parallelism cap for seed sweeps and grid rectangles
    HOMOG_THREADS: Optional[int] = None

    # --- Solver ---
    SOLVER_TOL: float = 1e-10
    # maxIter = factor * (number of free points)
    SOLVER_MAXITER_FACTOR: int = 20

    # --- Geometry / percolation ---
    GEOMETRY_TOL: float = 1e-10
    BLOCK_FACTOR: int = 12
    RECT_ASPECT: float = 1.0

    # --- Experiments ---
    OUTPUT_DIR: str = "results"

    @field_validator("HOMOG_THREADS", mode="before")
    @classmethod
    def parse_threads(cls, v):
        # Empty env var means "use the executor default"
        if v is None or (isinstance(v, str) and not v.strip()):
            return None
        v = int(v)
        if v < 1:
            raise ValueError("HOMOG_THREADS must be >= 1")
        return v

    @field_validator("LOG_LEVEL", mode="before")
    @classmethod
    def normalize_level(cls, v: str) -> str:
        return str(v).upper()

    # Pydantic V2 Settings Config
    model_config = SettingsConfigDict(
        case_sensitive=True,
        env_file=".env",
        extra="ignore"
    )


settings = Settings()
