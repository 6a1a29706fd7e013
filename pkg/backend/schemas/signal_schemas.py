# backend/schemas/signal_schemas.py
from pydantic import BaseModel, ConfigDict, Field, model_validator
from typing import Literal


# --- STFT ---
class StftConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    win_len: int = Field(320, gt=0, description="Analysis window length in samples")
    hop: int = Field(160, gt=0, description="Frame advance in samples")
    fft_size: int = Field(320, gt=0, description="Real FFT length; F = fft_size // 2 + 1")
    # sqrt_hann: sqrt-Hann analysis and synthesis; hann: Hann analysis, rectangular synthesis
    window: Literal["sqrt_hann", "hann"] = "sqrt_hann"

    @model_validator(mode="after")
    def check_ordering(self):
        if not (self.hop <= self.win_len <= self.fft_size):
            raise ValueError(f"Require hop <= win_len <= fft_size, got {self.hop}/{self.win_len}/{self.fft_size}.")
        return self

    @property
    def n_bins(self) -> int:
        return self.fft_size // 2 + 1


# --- High-band gain (1-based inclusive bin ranges) ---
class GainBandConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    a: int = Field(11, ge=1)
    b: int = Field(81, ge=1)
    c: int = Field(121, ge=1)
    d: int = Field(161, ge=1)
    g_max: float = Field(1.0, gt=0)
    eps: float = Field(1e-8, gt=0, description="Floor on the D magnitude sums")

    @model_validator(mode="after")
    def check_bands(self):
        if not (self.a < self.b < self.c < self.d):
            raise ValueError(f"Gain bands must satisfy a < b < c < d, got {self.a}/{self.b}/{self.c}/{self.d}.")
        return self


# --- Time-delay estimation ---
class TdeConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    block_len: int = Field(4096, ge=256, description="Minimum analysis block; grown to cover 2 * max_delay")
    max_delay: int = Field(16000, ge=0, description="Largest searched delay in samples at 16 kHz")
    smoothing: float = Field(0.9, ge=0.0, lt=1.0, description="Exponential averaging factor of the cross spectrum")
    confidence_threshold: float = Field(2.0, ge=1.0)
    streaming_preamble_s: float = Field(4.0, gt=0)


class DelayEstimate(BaseModel):
    delay: int = Field(..., ge=0, description="Samples by which the reference leads the microphone")
    confidence: float = Field(..., ge=0.0, description="Top peak over second peak of the GCC-PHAT correlation")
    reliable: bool = False
    blocks_used: int = 0
