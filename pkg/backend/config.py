# backend/config.py
import os
from typing import Optional
from dotenv import load_dotenv

# Load environment variables from a .env file if it exists
# Create a .env file in the repository root for local runs:
# LOG_LEVEL="DEBUG"
# DEFAULT_FILTER="mdf"
# MODEL_PATH="/path/to/gftnn_vad_l.gftw"

load_dotenv()

SUPPORTED_FILTERS = ("mdf", "wrls", "none")
SUPPORTED_COMBOS = ("DX", "EX", "DEY")


class Settings:
    PROJECT_NAME: str = "Hybrid AEC Engine"
    PROJECT_VERSION: str = "0.1.0"
    ENVIRONMENT: str = os.getenv("ENVIRONMENT", "development")

    LOG_LEVEL: str = os.getenv("LOG_LEVEL", "INFO").upper()

    # Pipeline defaults (overridable per run by the JSON config file and CLI flags)
    DEFAULT_FILTER: str = os.getenv("DEFAULT_FILTER", "wrls").lower()
    DEFAULT_COMBO: Optional[str] = os.getenv("DEFAULT_COMBO") or None
    MODEL_PATH: Optional[str] = os.getenv("MODEL_PATH") or None

    # Evaluation
    EVAL_WORKERS: int = int(os.getenv("EVAL_WORKERS", "1"))
    ERLE_WARMUP_S: float = float(os.getenv("ERLE_WARMUP_S", "1.0"))
    ERLE_DISPLAY_CAP_DB: float = float(os.getenv("ERLE_DISPLAY_CAP_DB", "200.0"))

    # Simulation
    SIMULATION_CHUNK_S: float = float(os.getenv("SIMULATION_CHUNK_S", "10.0"))

    # Directory holding the linear echo canceller modules
    ADAPTIVE_FILTERS_DIR: Optional[str] = os.getenv("ADAPTIVE_FILTERS_DIR")


settings = Settings()

if not settings.ADAPTIVE_FILTERS_DIR:
    # Default layout: 'adaptive_filters' sits one level above 'backend'
    filters_path = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "adaptive_filters")
    if os.path.isdir(filters_path):
        settings.ADAPTIVE_FILTERS_DIR = filters_path
    else:
        print("WARNING: ADAPTIVE_FILTERS_DIR environment variable is not set and default path not found.")

if settings.DEFAULT_FILTER not in SUPPORTED_FILTERS:
    raise ValueError(f"CRITICAL: DEFAULT_FILTER must be one of {SUPPORTED_FILTERS}, got '{settings.DEFAULT_FILTER}'.")

if settings.DEFAULT_COMBO is not None:
    settings.DEFAULT_COMBO = settings.DEFAULT_COMBO.upper()
    if settings.DEFAULT_COMBO not in SUPPORTED_COMBOS:
        raise ValueError(f"CRITICAL: DEFAULT_COMBO must be one of {SUPPORTED_COMBOS}, got '{settings.DEFAULT_COMBO}'.")

if settings.EVAL_WORKERS < 1:
    raise ValueError("EVAL_WORKERS must be at least 1.")

if settings.ERLE_WARMUP_S < 0 or settings.SIMULATION_CHUNK_S <= 0:
    raise ValueError("ERLE_WARMUP_S must be non-negative and SIMULATION_CHUNK_S positive.")
