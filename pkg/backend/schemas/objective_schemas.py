# backend/schemas/objective_schemas.py
from pydantic import BaseModel, Field, model_validator

# Weights of the submitted system's final objective
ECHO_WEIGHT = 1.0
MASK_WEIGHT = 0.2
VAD_WEIGHT = 0.1


class VadLabelConfig(BaseModel):
    relative_floor_db: float = Field(40.0, gt=0, description="Frames this far below the loudest frame are inactive")
    absolute_floor_dbfs: float = Field(-70.0, description="Frames below this level are inactive")


class LossReport(BaseModel):
    l_mag: float = Field(..., ge=0)
    l_pha: float = Field(..., ge=0)
    l_vad: float = Field(..., ge=0)
    l_echo: float = Field(..., ge=0)
    l_mask: float = Field(..., ge=0)
    l_final: float = Field(..., ge=0)

    @model_validator(mode="after")
    def check_composition(self):
        expected = ECHO_WEIGHT * self.l_echo + MASK_WEIGHT * self.l_mask + VAD_WEIGHT * self.l_vad
        if abs(expected - self.l_final) > 1e-12 * max(1.0, abs(expected)):
            raise ValueError(f"l_final {self.l_final} does not match weighted components {expected}.")
        return self

    def to_record(self) -> str:
        """Single line 'key=value' record used by the eval output."""
        return " ".join(f"{name}={value:.6g}" for name, value in self.model_dump().items())
