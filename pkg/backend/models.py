# backend/models.py
# Numpy-backed signal containers shared by every service. Configs, records and
# reports that cross process or file boundaries live in backend/schemas instead.
from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Optional

import numpy as np
from numpy.typing import NDArray

from backend.exceptions import ProcessingError, ShapeError

if TYPE_CHECKING:
    from backend.schemas.simulation_schemas import MixSpec

RealArray = NDArray[np.float64]
ComplexArray = NDArray[np.complex128]

# T×2 VAD logits, T×F echo weights in [0, 1], length-T binary activity labels
VadLogits = RealArray
EchoWeightMap = RealArray
VadLabels = NDArray[np.int8]

SUPPORTED_SAMPLE_RATES = (16000, 48000)
WIDEBAND_RATE = 16000
FULLBAND_RATE = 48000


@dataclass
class AudioBuffer:
    samples: RealArray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ShapeError(f"AudioBuffer expects a mono 1-D signal, got shape {self.samples.shape}.")
        if self.sample_rate <= 0:
            raise ShapeError(f"Sample rate must be positive, got {self.sample_rate}.")
        if not np.all(np.isfinite(self.samples)):
            raise ProcessingError("AudioBuffer contains NaN or Inf samples.")

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def duration_s(self) -> float:
        return len(self) / self.sample_rate

    def with_samples(self, samples: RealArray) -> "AudioBuffer":
        return AudioBuffer(samples=samples, sample_rate=self.sample_rate)


@dataclass
class Spectrogram:
    """Complex T×F matrix, time-major, DC bin first."""
    data: ComplexArray
    hop: int = 160
    fft_size: int = 320

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.complex128)
        if self.data.ndim != 2:
            raise ShapeError(f"Spectrogram data must be T×F, got shape {self.data.shape}.")
        if self.data.shape[1] != self.fft_size // 2 + 1:
            raise ShapeError(f"Spectrogram has {self.data.shape[1]} bins, expected {self.fft_size // 2 + 1} for fft_size {self.fft_size}.")
        if not np.all(np.isfinite(self.data)):
            raise ProcessingError("Spectrogram contains non-finite entries.")

    @property
    def n_frames(self) -> int:
        return self.data.shape[0]

    @property
    def n_bins(self) -> int:
        return self.data.shape[1]

    @property
    def magnitude(self) -> RealArray:
        return np.abs(self.data)

    def with_data(self, data: ComplexArray) -> "Spectrogram":
        return Spectrogram(data=data, hop=self.hop, fft_size=self.fft_size)


@dataclass
class FeatureTensor:
    """Real C_in×T×F network input; channel order is fixed per combo."""
    data: RealArray
    combo: str

    @property
    def n_channels(self) -> int:
        return self.data.shape[0]

    @property
    def n_frames(self) -> int:
        return self.data.shape[1]


@dataclass
class SubbandSignal:
    # wide: 0-8 kHz band at 16 kHz; high: the two upper bands (8-16k, 16-24k) at the subband rate
    wide: AudioBuffer
    high: RealArray
    n_full: int


@dataclass
class GainTrack:
    g: RealArray
    hop: int = 160

    def __len__(self) -> int:
        return self.g.shape[0]


@dataclass
class AecFrameOut:
    e_frame: RealArray
    y_frame: RealArray


@dataclass
class MixtureRecord:
    d: AudioBuffer
    s: AudioBuffer
    z: AudioBuffer
    v: AudioBuffer
    x: AudioBuffer
    spec: "MixSpec"
    realized_ser_db: float
    realized_snr_db: float
    # Leveling reference kept so ST-FE mixtures (s zeroed afterwards) stay measurable
    near_end_active_power: float = 0.0
    near_end_power: float = 0.0
    active_mask: Optional[NDArray[np.bool_]] = field(default=None, repr=False)


@dataclass(frozen=True)
class Filterbank:
    """Cosine-modulated FIR bank; analysis/synthesis are bands × taps."""
    prototype: RealArray
    analysis: RealArray
    synthesis: RealArray
    bands: int = 3
    decimation: int = 3

    @property
    def taps(self) -> int:
        return self.prototype.shape[0]

    @property
    def group_delay(self) -> int:
        """End-to-end analysis plus synthesis delay in full-band samples."""
        return self.taps - 1

    def to_bytes(self) -> bytes:
        """Float-32 little-endian blob: prototype, then analysis rows, then synthesis rows."""
        parts = [self.prototype, self.analysis.ravel(), self.synthesis.ravel()]
        return b"".join(np.asarray(p, dtype="<f4").tobytes() for p in parts)
