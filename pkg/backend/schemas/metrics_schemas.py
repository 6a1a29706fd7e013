# backend/schemas/metrics_schemas.py
from pydantic import BaseModel, Field


class ErleResult(BaseModel):
    erle_db: float = Field(..., description="Echo return loss enhancement; +inf when the output is all-zero")
    valid: bool = True


class LevelMeasurement(BaseModel):
    ser_db: float
    snr_db: float
