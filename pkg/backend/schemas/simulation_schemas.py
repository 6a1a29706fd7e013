# backend/schemas/simulation_schemas.py
import math
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from typing import List, Literal, Optional

Scenario = Literal["dt", "st_ne", "st_fe"]

DEFAULT_SER_VALUES = (-5.0, 5.0, 15.0, math.inf)
DEFAULT_SNR_VALUES = (5.0, math.inf)


# --- Mixture specification ---
class MixSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    ser_db: float = Field(..., description="Signal-to-echo ratio; +inf removes the echo")
    snr_db: float = Field(..., description="Signal-to-noise ratio; +inf removes the noise")
    scenario: Scenario = "dt"
    nonlinear: bool = False
    seed: int = 0
    echo_delay: int = Field(0, ge=0, description="Bulk delay of the echo path in samples")
    rir_decay_ms: float = Field(150.0, ge=0.0)

    @field_validator("ser_db", "snr_db")
    @classmethod
    def no_nan(cls, value: float) -> float:
        if math.isnan(value) or value == -math.inf:
            raise ValueError("Levels must be finite or +inf.")
        return value

    @model_validator(mode="after")
    def check_scenario(self):
        if self.scenario == "st_ne" and self.ser_db != math.inf:
            raise ValueError("Near-end single-talk requires SER = +inf.")
        if self.scenario == "st_fe" and (self.ser_db == math.inf or self.snr_db != math.inf):
            raise ValueError("Far-end single-talk requires a finite SER and SNR = +inf.")
        return self

    @property
    def condition(self) -> str:
        return f"{self.scenario}_snr{_level_tag(self.snr_db)}_ser{_level_tag(self.ser_db)}"


def _level_tag(value: float) -> str:
    return "inf" if value == math.inf else f"{value:g}"


class SimulationGrid(BaseModel):
    ser_values: List[float] = Field(default_factory=lambda: list(DEFAULT_SER_VALUES))
    snr_values: List[float] = Field(default_factory=lambda: list(DEFAULT_SNR_VALUES))
    include_far_end_single_talk: bool = True
    nonlinear: bool = False
    echo_delay: int = Field(0, ge=0)
    rir_decay_ms: float = Field(150.0, ge=0.0)
    chunk_s: float = Field(10.0, gt=0)
    sample_rate: Literal[16000, 48000] = 48000
    utterances: int = Field(1, ge=0, description="Synthetic utterances generated when no source WAVs are given")
    seed: int = 0


# --- Manifest ---
class ManifestEntry(BaseModel):
    item: str
    condition: str
    scenario: Scenario
    ser_db: float
    snr_db: float
    realized_ser_db: float
    realized_snr_db: float
    nonlinear: bool
    echo_delay: int
    seed: int
    mic_path: str
    ref_path: str
    near_end_path: str
    echo_path: str
    noise_path: str
    sample_rate: int
    near_end_active_power: float = 0.0
    near_end_power: float = 0.0
    note: Optional[str] = None
