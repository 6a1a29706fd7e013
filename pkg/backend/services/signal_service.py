# backend/services/signal_service.py
import logging
from functools import lru_cache
from typing import Optional, Tuple

import numpy as np
import soundfile as sf
from numpy.lib.stride_tricks import sliding_window_view
from scipy import fft as sp_fft
from scipy.signal import check_COLA, get_window

from backend.exceptions import AudioIOError, ConfigurationError, EmptyInputError, ShapeError
from backend.models import (
    SUPPORTED_SAMPLE_RATES,
    WIDEBAND_RATE,
    AudioBuffer,
    ComplexArray,
    FeatureTensor,
    RealArray,
    Spectrogram,
)
from backend.schemas.signal_schemas import StftConfig

logger = logging.getLogger(__name__)

# --- Configuration ---
DEFAULT_STFT = StftConfig()
DEFAULT_COMPRESS_EXPONENT = 0.5
WAV_SUBTYPES = ("PCM_16", "FLOAT")

# Channel layout of the network input per feature combination
COMBO_SIGNALS = {
    "DX": ("D", "X"),
    "EX": ("E", "X"),
    "DEY": ("D", "E", "Y"),
}


# --- Windows ---
@lru_cache(maxsize=16)
def window_pair(cfg: StftConfig) -> Tuple[RealArray, RealArray, float]:
    """Returns (analysis, synthesis, overlap-add constant) for cfg; raises if the pair is not COLA."""
    hann = get_window("hann", cfg.win_len)  # periodic
    if cfg.window == "sqrt_hann":
        analysis = np.sqrt(hann)
        synthesis = analysis.copy()
    else:
        analysis = hann
        synthesis = np.ones(cfg.win_len)
    product = analysis * synthesis
    if not check_COLA(product, cfg.win_len, cfg.win_len - cfg.hop):
        raise ConfigurationError(f"Window '{cfg.window}' does not satisfy COLA at win_len={cfg.win_len}, hop={cfg.hop}.")
    cola = float(np.sum(product) / cfg.hop)
    analysis.setflags(write=False)
    synthesis.setflags(write=False)
    return analysis, synthesis, cola


def n_frames(n_samples: int, cfg: StftConfig = DEFAULT_STFT) -> int:
    if n_samples < cfg.win_len:
        return 0
    return (n_samples - cfg.win_len) // cfg.hop + 1


# --- STFT / iSTFT ---
def stft(buf: AudioBuffer, cfg: StftConfig = DEFAULT_STFT) -> Spectrogram:
    """Windowed real FFT per frame, no head padding: T = floor((len - win_len) / hop) + 1."""
    if buf.sample_rate != WIDEBAND_RATE:
        raise ConfigurationError(f"STFT runs on the {WIDEBAND_RATE} Hz band, got {buf.sample_rate} Hz.")
    if len(buf) < cfg.win_len:
        raise EmptyInputError(f"Buffer of {len(buf)} samples is shorter than one window ({cfg.win_len}).")
    analysis, _, _ = window_pair(cfg)
    frames = sliding_window_view(buf.samples, cfg.win_len)[::cfg.hop]
    data = sp_fft.rfft(frames * analysis, n=cfg.fft_size, axis=-1)
    return Spectrogram(data=data, hop=cfg.hop, fft_size=cfg.fft_size)


def istft(spec: Spectrogram, cfg: StftConfig = DEFAULT_STFT, length: Optional[int] = None) -> AudioBuffer:
    """Weighted overlap-add; output length is (T - 1) * hop + win_len unless length is given."""
    if spec.n_bins != cfg.n_bins or spec.fft_size != cfg.fft_size:
        raise ShapeError(f"Spectrogram has {spec.n_bins} bins, config expects {cfg.n_bins}.")
    _, synthesis, cola = window_pair(cfg)
    n_out = (spec.n_frames - 1) * cfg.hop + cfg.win_len if spec.n_frames > 0 else 0
    out = np.zeros(n_out)
    if spec.n_frames > 0:
        frames = sp_fft.irfft(spec.data, n=cfg.fft_size, axis=-1)[:, :cfg.win_len] * synthesis
        for t in range(spec.n_frames):
            start = t * cfg.hop
            out[start:start + cfg.win_len] += frames[t]
        out /= cola
    if length is not None:
        out = fit_length(out, length)
    return AudioBuffer(samples=out, sample_rate=WIDEBAND_RATE)


def frame_energy(spec: Spectrogram) -> RealArray:
    """Per-frame time-domain energy recovered from the one-sided spectrum (Parseval)."""
    power = np.abs(spec.data) ** 2
    weights = np.full(spec.n_bins, 2.0)
    weights[0] = 1.0
    if spec.fft_size % 2 == 0:
        weights[-1] = 1.0
    return power @ weights / spec.fft_size


# --- Power-law compression ---
def _power_law(data: ComplexArray, exponent: float) -> ComplexArray:
    return np.power(np.abs(data), exponent) * np.exp(1j * np.angle(data))


def compress_spectrum(spec: Spectrogram, p: float = DEFAULT_COMPRESS_EXPONENT) -> Spectrogram:
    """|X|^p with the phase kept."""
    if not (0.0 < p <= 1.0):
        raise ConfigurationError(f"Compression exponent must lie in (0, 1], got {p}.")
    if p == 1.0:
        return spec.with_data(spec.data.copy())
    return spec.with_data(_power_law(spec.data, p))


def decompress_spectrum(spec: Spectrogram, p: float = DEFAULT_COMPRESS_EXPONENT) -> Spectrogram:
    if not (0.0 < p <= 1.0):
        raise ConfigurationError(f"Compression exponent must lie in (0, 1], got {p}.")
    if p == 1.0:
        return spec.with_data(spec.data.copy())
    return spec.with_data(_power_law(spec.data, 1.0 / p))


# --- Network input ---
def stack_features(combo: str,
                   D: Optional[Spectrogram] = None,
                   E: Optional[Spectrogram] = None,
                   X: Optional[Spectrogram] = None,
                   Y: Optional[Spectrogram] = None,
                   compress_exponent: Optional[float] = None) -> FeatureTensor:
    """
    Stacks real/imag parts of the spectrograms a combo needs:
    DEY -> [D_r, D_i, E_r, E_i, Y_r, Y_i], DX -> [D_r, D_i, X_r, X_i], EX -> [E_r, E_i, X_r, X_i].
    Each spectrogram is compressed first when compress_exponent is given.
    """
    combo_key = combo.upper() if isinstance(combo, str) else combo
    if combo_key not in COMBO_SIGNALS:
        raise ConfigurationError(f"Unknown feature combination '{combo}'. Expected one of {list(COMBO_SIGNALS)}.")
    available = {"D": D, "E": E, "X": X, "Y": Y}
    specs = []
    for name in COMBO_SIGNALS[combo_key]:
        spec = available[name]
        if spec is None:
            raise ConfigurationError(f"Combination {combo_key} requires spectrogram {name}.")
        specs.append(spec)
    shapes = {s.data.shape for s in specs}
    if len(shapes) != 1:
        raise ShapeError(f"Spectrograms for {combo_key} disagree in shape: {sorted(shapes)}.")
    channels = []
    for spec in specs:
        if compress_exponent is not None:
            spec = compress_spectrum(spec, compress_exponent)
        channels.extend([spec.data.real, spec.data.imag])
    return FeatureTensor(data=np.stack(channels, axis=0), combo=combo_key)


# --- Buffer helpers ---
def fit_length(samples: RealArray, n: int) -> RealArray:
    """Crops or zero-pads at the tail to exactly n samples."""
    samples = np.asarray(samples, dtype=np.float64)
    if samples.shape[0] >= n:
        return samples[:n].copy()
    return np.concatenate([samples, np.zeros(n - samples.shape[0])])


def delay_buffer(samples: RealArray, k: int) -> RealArray:
    """Shifts right by k samples, keeping the length."""
    samples = np.asarray(samples, dtype=np.float64)
    if k <= 0:
        return samples.copy()
    out = np.zeros_like(samples)
    if k < samples.shape[0]:
        out[k:] = samples[:samples.shape[0] - k]
    return out


# --- WAV I/O ---
def read_wav(path: str) -> AudioBuffer:
    try:
        data, rate = sf.read(path, dtype="float64", always_2d=False)
    except (RuntimeError, OSError) as e:
        logger.error(f"[WAV] Could not read {path}: {e}")
        raise AudioIOError(f"Could not read WAV file {path}: {e}") from e
    if data.ndim != 1:
        raise AudioIOError(f"{path} has {data.shape[1]} channels; only mono is supported.")
    if rate not in SUPPORTED_SAMPLE_RATES:
        raise AudioIOError(f"{path} is at {rate} Hz; supported rates are {SUPPORTED_SAMPLE_RATES}.")
    logger.debug(f"[WAV] Read {path}: {data.shape[0]} samples at {rate} Hz.")
    return AudioBuffer(samples=data, sample_rate=rate)


def write_wav(path: str, buf: AudioBuffer, subtype: str = "FLOAT") -> None:
    """Writes mono PCM_16 or FLOAT; samples are clamped to [-1, 1]."""
    if subtype not in WAV_SUBTYPES:
        raise ConfigurationError(f"Unsupported WAV subtype '{subtype}'. Use one of {WAV_SUBTYPES}.")
    if buf.sample_rate not in SUPPORTED_SAMPLE_RATES:
        raise AudioIOError(f"Cannot write {buf.sample_rate} Hz audio; supported rates are {SUPPORTED_SAMPLE_RATES}.")
    clipped = np.clip(buf.samples, -1.0, 1.0)
    n_clipped = int(np.count_nonzero(clipped != buf.samples))
    if n_clipped:
        logger.warning(f"[WAV] Clamped {n_clipped} out-of-range samples while writing {path}.")
    try:
        sf.write(path, clipped, buf.sample_rate, subtype=subtype)
    except (RuntimeError, OSError) as e:
        logger.error(f"[WAV] Could not write {path}: {e}")
        raise AudioIOError(f"Could not write WAV file {path}: {e}") from e
