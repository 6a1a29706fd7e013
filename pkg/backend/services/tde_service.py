# backend/services/tde_service.py
import logging
from typing import Optional, Tuple

import numpy as np
from scipy import fft as sp_fft

from backend.exceptions import ConfigurationError, EmptyInputError, ShapeError
from backend.models import WIDEBAND_RATE, AudioBuffer, ComplexArray, RealArray
from backend.schemas.signal_schemas import DelayEstimate, TdeConfig

logger = logging.getLogger(__name__)

# --- Configuration ---
DEFAULT_TDE = TdeConfig()
PHAT_EPS = 1e-12
# Lags within this distance of the top peak are not candidates for the second peak
PEAK_GUARD = 2


def gcc_phat_cross_spectrum(x_block: RealArray, d_block: RealArray, fft_size: int) -> Tuple[ComplexArray, bool]:
    """
    PHAT-weighted cross spectrum D(f) conj(X(f)) / |D(f) conj(X(f))|. With d = x delayed by k
    the phase is -2 pi f k / N and the correlation peaks at lag +k.
    Returns (spectrum, valid); an all-zero block gives a zero spectrum flagged invalid.
    """
    x_block = np.asarray(x_block, dtype=np.float64)
    d_block = np.asarray(d_block, dtype=np.float64)
    if x_block.shape != d_block.shape or x_block.ndim != 1:
        raise ShapeError(f"Blocks must be 1-D and equal length, got {x_block.shape} and {d_block.shape}.")
    if 2 * x_block.shape[0] > fft_size:
        raise ShapeError(f"Block of {x_block.shape[0]} samples needs fft_size >= {2 * x_block.shape[0]}, got {fft_size}.")
    n_bins = fft_size // 2 + 1
    if not np.any(x_block) or not np.any(d_block):
        return np.zeros(n_bins, dtype=np.complex128), False
    cross = sp_fft.rfft(d_block, n=fft_size) * np.conj(sp_fft.rfft(x_block, n=fft_size))
    return cross / np.maximum(np.abs(cross), PHAT_EPS), True


def _next_pow2(n: int) -> int:
    return 1 << max(0, int(n - 1).bit_length())


class GccPhatEstimator:
    """Exponentially averaged GCC-PHAT over successive blocks of one stream."""

    def __init__(self, block_len: int, max_delay: int, smoothing: float = DEFAULT_TDE.smoothing):
        if block_len <= 0 or max_delay < 0:
            raise ConfigurationError(f"Invalid TDE block {block_len} or max delay {max_delay}.")
        self.block_len = block_len
        self.fft_size = 2 * block_len
        self.max_delay = min(max_delay, block_len)
        self.smoothing = smoothing
        self._acc: Optional[ComplexArray] = None
        self.blocks_used = 0
        self.blocks_skipped = 0

    def update(self, x_block: RealArray, d_block: RealArray) -> None:
        spectrum, valid = gcc_phat_cross_spectrum(x_block, d_block, self.fft_size)
        if not valid:
            self.blocks_skipped += 1
            return
        if self._acc is None:
            self._acc = spectrum
        else:
            self._acc = self.smoothing * self._acc + (1.0 - self.smoothing) * spectrum
        self.blocks_used += 1

    def correlation(self) -> RealArray:
        """|cc| over lags 0..max_delay."""
        if self._acc is None:
            return np.zeros(self.max_delay + 1)
        cc = sp_fft.irfft(self._acc, n=self.fft_size)
        return np.abs(cc[:self.max_delay + 1])

    def estimate(self, threshold: float = DEFAULT_TDE.confidence_threshold) -> DelayEstimate:
        if self._acc is None:
            return DelayEstimate(delay=0, confidence=0.0, reliable=False, blocks_used=0)
        cc = self.correlation()
        top = int(np.argmax(cc))
        masked = cc.copy()
        masked[max(0, top - PEAK_GUARD):top + PEAK_GUARD + 1] = 0.0
        second = float(np.max(masked)) if masked.size else 0.0
        confidence = float(cc[top] / second) if second > 0 else float("inf")
        if not np.isfinite(confidence):
            confidence = float(np.finfo(np.float64).max)
        return DelayEstimate(delay=top, confidence=confidence, reliable=confidence >= threshold,
                             blocks_used=self.blocks_used)


def estimate_delay(x: AudioBuffer, d: AudioBuffer, max_delay: Optional[int] = None,
                   cfg: TdeConfig = DEFAULT_TDE, mode: str = "offline") -> DelayEstimate:
    """
    Delay of the microphone d relative to the reference x, in [0, max_delay]. The block grows
    to cover twice the search range so a whole echo delay fits inside one block.
    """
    if x.sample_rate != WIDEBAND_RATE or d.sample_rate != WIDEBAND_RATE:
        raise ConfigurationError(f"TDE runs at {WIDEBAND_RATE} Hz, got {x.sample_rate} / {d.sample_rate} Hz.")
    max_delay = cfg.max_delay if max_delay is None else max_delay
    n = min(len(x), len(d))
    if mode == "streaming":
        n = min(n, int(cfg.streaming_preamble_s * WIDEBAND_RATE))
    elif mode != "offline":
        raise ConfigurationError(f"Unknown TDE mode '{mode}'.")
    if n < cfg.block_len:
        raise EmptyInputError(f"TDE needs at least {cfg.block_len} samples, got {n}.")

    effective_max = min(max_delay, n // 2)
    block = min(max(cfg.block_len, _next_pow2(2 * effective_max)), n)
    hop = block // 2
    estimator = GccPhatEstimator(block_len=block, max_delay=effective_max, smoothing=cfg.smoothing)
    for start in range(0, n - block + 1, hop):
        estimator.update(x.samples[start:start + block], d.samples[start:start + block])

    est = estimator.estimate(cfg.confidence_threshold)
    logger.info(f"[TDE] {mode} estimate over {n} samples (block {block}, {estimator.blocks_used} blocks, "
                f"{estimator.blocks_skipped} silent): delay={est.delay}, confidence={est.confidence:.2f}, "
                f"reliable={est.reliable}")
    return est


def align(x: AudioBuffer, est: DelayEstimate, length: Optional[int] = None) -> AudioBuffer:
    """Delays the reference by est.delay so it lines up with the microphone; output has `length` samples."""
    length = len(x) if length is None else length
    out = np.zeros(length)
    n_copy = max(0, min(len(x), length - est.delay))
    if n_copy:
        out[est.delay:est.delay + n_copy] = x.samples[:n_copy]
    return x.with_samples(out)
