# backend/services/objectives_service.py
import logging
from typing import Optional, Tuple

import numpy as np
from scipy.special import log_softmax, softmax

from backend.exceptions import ConfigurationError, ShapeError
from backend.models import WIDEBAND_RATE, AudioBuffer, EchoWeightMap, RealArray, Spectrogram, VadLabels, VadLogits
from backend.schemas.objective_schemas import ECHO_WEIGHT, MASK_WEIGHT, VAD_WEIGHT, LossReport, VadLabelConfig
from backend.schemas.signal_schemas import StftConfig
from backend.services.signal_service import DEFAULT_COMPRESS_EXPONENT, DEFAULT_STFT

logger = logging.getLogger(__name__)

# --- Configuration ---
DEFAULT_VAD_LABELS = VadLabelConfig()
DEFAULT_TEMPERATURE = 1.0
# Fixed weight selecting the speech-active component of the Gumbel-softmax sample
W_FIX = np.array([0.0, 1.0])
_LEVEL_FLOOR = 1e-20


def _check_pair(a: Spectrogram, b: Spectrogram, what: str) -> None:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{what}: spectrogram shapes differ, {a.data.shape} vs {b.data.shape}.")


def _check_exponent(p: float) -> None:
    if not (0.0 < p <= 1.0):
        raise ConfigurationError(f"Compression exponent must lie in (0, 1], got {p}.")


# --- Spectral losses ---
def plcpa(S: Spectrogram, S_hat: Spectrogram, p: float = DEFAULT_COMPRESS_EXPONENT) -> Tuple[RealArray, RealArray]:
    """Per-bin magnitude and phase-aware terms of the power-law compressed loss."""
    _check_pair(S, S_hat, "plcpa")
    _check_exponent(p)
    mag = np.power(np.abs(S.data), p)
    mag_hat = np.power(np.abs(S_hat.data), p)
    l_mag = (mag - mag_hat) ** 2
    # exp(j angle(0)) = 1, so zero bins compress to zero
    l_pha = np.abs(mag * np.exp(1j * np.angle(S.data)) - mag_hat * np.exp(1j * np.angle(S_hat.data))) ** 2
    return l_mag, l_pha


def plcpa_loss(S: Spectrogram, S_hat: Spectrogram, p: float = DEFAULT_COMPRESS_EXPONENT) -> float:
    l_mag, l_pha = plcpa(S, S_hat, p)
    return float(np.mean(l_mag + l_pha))


def echo_weight(Z: Spectrogram, S: Spectrogram) -> EchoWeightMap:
    """|Z|² / (|Z|² + |S|²) per bin; bins where both are zero get 0."""
    _check_pair(Z, S, "echo_weight")
    z_pow = np.abs(Z.data) ** 2
    s_pow = np.abs(S.data) ** 2
    total = z_pow + s_pow
    out = np.zeros_like(total)
    np.divide(z_pow, total, out=out, where=total > 0)
    return np.clip(out, 0.0, 1.0)


def loss_echo(S: Spectrogram, S_hat: Spectrogram, Z: Spectrogram, p: float = DEFAULT_COMPRESS_EXPONENT) -> float:
    """Echo-weighted amplitude loss plus the phase-aware term, averaged over T and F."""
    l_mag, l_pha = plcpa(S, S_hat, p)
    w_echo = echo_weight(Z, S)
    return float(np.mean(l_mag * (1.0 + w_echo) + l_pha))


# --- VAD supervision ---
def frame_levels_db(s: AudioBuffer, cfg: StftConfig = DEFAULT_STFT) -> RealArray:
    """Mean-square level (dBFS) of each analysis frame, framed like the STFT."""
    if s.sample_rate != WIDEBAND_RATE:
        raise ConfigurationError(f"VAD labels are computed at {WIDEBAND_RATE} Hz, got {s.sample_rate} Hz.")
    if len(s) < cfg.win_len:
        return np.zeros(0)
    frames = np.lib.stride_tricks.sliding_window_view(s.samples, cfg.win_len)[::cfg.hop]
    power = np.mean(frames ** 2, axis=1)
    return 10.0 * np.log10(np.maximum(power, _LEVEL_FLOOR))


def vad_labels(s: AudioBuffer, cfg: VadLabelConfig = DEFAULT_VAD_LABELS,
               stft_cfg: StftConfig = DEFAULT_STFT) -> VadLabels:
    """Frame is active when it is within relative_floor_db of the loudest frame and above the absolute floor."""
    levels = frame_levels_db(s, stft_cfg)
    if levels.size == 0:
        return np.zeros(0, dtype=np.int8)
    peak = float(np.max(levels))
    active = (levels > peak - cfg.relative_floor_db) & (levels > cfg.absolute_floor_dbfs)
    return active.astype(np.int8)


def loss_vad(P: VadLogits, labels: VadLabels) -> float:
    """Mean cross-entropy of softmax(P) against the binary labels."""
    P = np.asarray(P, dtype=np.float64)
    labels = np.asarray(labels)
    if P.ndim != 2 or P.shape[1] != 2 or P.shape[0] != labels.shape[0]:
        raise ShapeError(f"VAD logits {P.shape} do not match {labels.shape[0]} labels.")
    if P.shape[0] == 0:
        return 0.0
    log_p = log_softmax(P, axis=1)
    return float(-np.mean(log_p[np.arange(P.shape[0]), labels.astype(np.int64)]))


def gumbel_softmax(P_t: RealArray, temperature: float = DEFAULT_TEMPERATURE,
                   noise_seed: Optional[int] = None) -> RealArray:
    """
    softmax((logits + g) / temperature) along the last axis. With noise_seed None no Gumbel
    noise is drawn, which is the evaluation mode.
    """
    if temperature <= 0:
        raise ConfigurationError(f"Gumbel-softmax temperature must be positive, got {temperature}.")
    logits = np.asarray(P_t, dtype=np.float64)
    if noise_seed is not None:
        rng = np.random.default_rng(noise_seed)
        logits = logits + rng.gumbel(size=logits.shape)
    return softmax(logits / temperature, axis=-1)


def loss_mask(S: Spectrogram, S_hat: Spectrogram, P: VadLogits, p: float = DEFAULT_COMPRESS_EXPONENT,
              temperature: float = DEFAULT_TEMPERATURE, noise_seed: Optional[int] = None) -> float:
    """mean over T, F of (|S|^p - |Ŝ|^p · W_vad(t))²; W_vad(t) = GS(P_t) · [0, 1]."""
    _check_pair(S, S_hat, "loss_mask")
    _check_exponent(p)
    P = np.asarray(P, dtype=np.float64)
    if P.shape != (S.n_frames, 2):
        raise ShapeError(f"VAD logits {P.shape} do not match {S.n_frames} frames.")
    w_vad = gumbel_softmax(P, temperature, noise_seed) @ W_FIX
    diff = np.power(np.abs(S.data), p) - np.power(np.abs(S_hat.data), p) * w_vad[:, None]
    return float(np.mean(diff ** 2))


def loss_final(l_echo: float, l_mask: float, l_vad: float) -> float:
    for name, value in (("l_echo", l_echo), ("l_mask", l_mask), ("l_vad", l_vad)):
        if value < 0:
            raise ConfigurationError(f"Loss component {name} must be nonnegative, got {value}.")
    return ECHO_WEIGHT * l_echo + MASK_WEIGHT * l_mask + VAD_WEIGHT * l_vad


def compute_loss_report(S: Spectrogram, S_hat: Spectrogram, Z: Spectrogram, P: VadLogits, labels: VadLabels,
                        p: float = DEFAULT_COMPRESS_EXPONENT) -> LossReport:
    l_mag, l_pha = plcpa(S, S_hat, p)
    l_echo = loss_echo(S, S_hat, Z, p)
    l_mask = loss_mask(S, S_hat, P, p)
    l_vad = loss_vad(P, labels)
    report = LossReport(l_mag=float(np.mean(l_mag)), l_pha=float(np.mean(l_pha)), l_vad=l_vad,
                        l_echo=l_echo, l_mask=l_mask, l_final=loss_final(l_echo, l_mask, l_vad))
    logger.debug(f"[Objectives] {report.to_record()}")
    return report
