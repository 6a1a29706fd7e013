# backend/schemas/postfilter_schemas.py
from pydantic import BaseModel, ConfigDict, Field, model_validator

COMBO_CHANNELS = {"DX": 4, "EX": 4, "DEY": 6}


class ModelArch(BaseModel):
    model_config = ConfigDict(frozen=True)

    channels: int = Field(128, ge=1, description="C: channels of every encoder/decoder layer (80 for -S, 128 for -L)")
    input_channels: int = Field(6, ge=1, description="C_in: 4 for DX/EX, 6 for DEY")
    encoder_layers: int = Field(4, ge=0)
    ftlstm_blocks: int = Field(2, ge=0)
    freq_bins: int = Field(161, ge=3)
    freq_stride: int = Field(2, ge=1)
    compress_exponent: float = Field(0.5, gt=0, le=1)
    vad_head: bool = True

    @model_validator(mode="after")
    def check_stride(self):
        if self.freq_stride != 2:
            raise ValueError("Only frequency stride 2 is supported.")
        return self

    @classmethod
    def for_combo(cls, combo: str, channels: int = 128, **kwargs) -> "ModelArch":
        combo = combo.upper()
        if combo not in COMBO_CHANNELS:
            raise ValueError(f"Unknown feature combination '{combo}'.")
        return cls(channels=channels, input_channels=COMBO_CHANNELS[combo], **kwargs)

    def encoder_freqs(self) -> list[int]:
        freqs = [self.freq_bins]
        for _ in range(self.encoder_layers):
            freqs.append((freqs[-1] - 3) // 2 + 1)
        return freqs
