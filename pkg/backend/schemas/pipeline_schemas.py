# backend/schemas/pipeline_schemas.py
import json
import os
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator
from typing import Any, Dict, Literal, Optional

from backend.config import settings
from backend.exceptions import ConfigurationError
from backend.schemas.signal_schemas import GainBandConfig, StftConfig, TdeConfig


class MdfParameters(BaseModel):
    tail_ms: float = Field(300.0, gt=0)
    block_samples: int = Field(320, gt=0)
    mu: float = Field(0.5, ge=0)
    delta: float = Field(1e-6, gt=0)


class WrlsParameters(BaseModel):
    taps: int = Field(10, ge=1, description="L: past STFT frames per bin")
    forgetting: float = Field(0.999, gt=0, lt=1)
    delta_init: float = Field(1e-3, gt=0)
    crossband: int = Field(1, ge=0, le=4, description="Neighbour bins per side in each bin regressor")


# --- Pipeline configuration (JSON file keys == field names) ---
class PipelineConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", protected_namespaces=())

    filter: Literal["mdf", "wrls", "none"] = Field(default_factory=lambda: settings.DEFAULT_FILTER)
    tde: bool = True
    combo: Optional[Literal["DX", "EX", "DEY"]] = Field(default_factory=lambda: settings.DEFAULT_COMBO)
    model_path: Optional[str] = Field(default_factory=lambda: settings.MODEL_PATH)
    random_model_seed: Optional[int] = Field(None, description="Use a seeded random-weight model instead of a file")
    model_channels: int = Field(128, ge=1)
    subband: bool = True
    mode: Literal["offline", "streaming"] = "offline"
    stft: StftConfig = Field(default_factory=StftConfig)
    gain_bands: GainBandConfig = Field(default_factory=GainBandConfig)
    tde_config: TdeConfig = Field(default_factory=TdeConfig)
    mdf: MdfParameters = Field(default_factory=MdfParameters)
    wrls: WrlsParameters = Field(default_factory=WrlsParameters)
    filterbank_taps: int = Field(96, ge=32)
    erle_warmup_s: float = Field(default_factory=lambda: settings.ERLE_WARMUP_S, ge=0)
    workers: int = Field(default_factory=lambda: settings.EVAL_WORKERS, ge=1)

    @field_validator("combo", mode="before")
    @classmethod
    def upper_combo(cls, value):
        if isinstance(value, str):
            value = value.upper()
            return None if value == "NONE" else value
        return value

    @model_validator(mode="after")
    def check_combo_needs_filter(self):
        if self.combo in ("EX", "DEY") and self.filter == "none":
            raise ValueError(f"Combination {self.combo} needs a linear filter (E/Y), but filter is 'none'.")
        if self.combo is not None and self.model_path is None and self.random_model_seed is None:
            raise ValueError(f"Combination {self.combo} needs a post-filter model: set model_path or random_model_seed.")
        return self

    @property
    def uses_postfilter(self) -> bool:
        return self.combo is not None

    @classmethod
    def from_sources(cls, config_path: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None) -> "PipelineConfig":
        """Settings defaults, overlaid by the JSON config file, overlaid by CLI flags."""
        values: Dict[str, Any] = {}
        if config_path:
            if not os.path.isfile(config_path):
                raise ConfigurationError(f"Config file not found: {config_path}")
            try:
                with open(config_path, "r", encoding="utf-8") as fh:
                    values = json.load(fh)
            except json.JSONDecodeError as e:
                raise ConfigurationError(f"Config file {config_path} is not valid JSON: {e}") from e
            if not isinstance(values, dict):
                raise ConfigurationError(f"Config file {config_path} must hold a JSON object.")
        for key, value in (overrides or {}).items():
            if value is not None:
                values[key] = value
        try:
            return cls(**values)
        except ValidationError as e:
            raise ConfigurationError(f"Invalid pipeline configuration: {e}") from e


class StageTiming(BaseModel):
    seconds: float = 0.0
    rtf: float = 0.0


class RunReport(BaseModel):
    status: str = "success"
    filter: str
    combo: Optional[str] = None
    subband: bool
    mode: str
    sample_rate: int
    duration_s: float
    delay: Optional[int] = None
    delay_confidence: Optional[float] = None
    alignment_applied: bool = False
    latency_samples: int = 0
    wrls_reinitializations: int = 0
    stages: Dict[str, StageTiming] = Field(default_factory=dict)
    total_rtf: float = 0.0
    output_path: Optional[str] = None
