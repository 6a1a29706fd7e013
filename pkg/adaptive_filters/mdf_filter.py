# adaptive_filters/mdf_filter.py
import logging
import math

import numpy as np
from scipy import fft as sp_fft

from backend.exceptions import ConfigurationError, ProcessingError, ShapeError
from backend.models import AecFrameOut

logger = logging.getLogger(__name__)

# Far-end frames below -60 dBFS mean power do not drive adaptation
FREEZE_POWER = 1e-6


class MdfFilter:
    """
    Multidelay block frequency-domain adaptive filter: partitioned overlap-save convolution
    with a gradient-constrained, per-bin normalized LMS update.

    Block N, FFT 2N, K = ceil(tail / N) partitions. Partition j holds taps jN..(j+1)N-1.
    """

    def __init__(self, tail_ms: float = 300.0, block_samples: int = 320, mu: float = 0.5,
                 delta: float = 1e-6, sample_rate: int = 16000):
        if tail_ms <= 0 or block_samples <= 0 or sample_rate <= 0:
            raise ConfigurationError(f"MDF needs positive tail_ms, block_samples and sample_rate, got "
                                     f"{tail_ms}/{block_samples}/{sample_rate}.")
        if mu < 0 or delta <= 0:
            raise ConfigurationError(f"MDF needs mu >= 0 and delta > 0, got mu={mu}, delta={delta}.")
        self.tail_ms = float(tail_ms)
        self.block = int(block_samples)
        self.fft_size = 2 * self.block
        self.n_bins = self.block + 1
        self.partitions = max(1, math.ceil(round(self.tail_ms * sample_rate / 1000.0, 6) / self.block))
        self.mu = float(mu)
        self.delta = float(delta)
        self.sample_rate = sample_rate

        self.W = np.zeros((self.partitions, self.n_bins), dtype=np.complex128)
        self.X_hist = np.zeros((self.partitions, self.n_bins), dtype=np.complex128)
        self.power = np.zeros(self.n_bins)
        self._x_prev = np.zeros(self.block)
        self.frames_processed = 0
        self.frames_adapted = 0

        self.name = f"MDF (K={self.partitions}, N={self.block})"
        logger.info(f"[{self.name}] Initialized: tail_ms={self.tail_ms}, mu={self.mu}, delta={self.delta}, "
                    f"sample_rate={self.sample_rate}")

    @classmethod
    def get_parameters_definition(cls):
        return {
            "tail_ms": {"type": "float", "default": 300.0, "min": 1.0, "label": "Modeled echo tail (ms)"},
            "block_samples": {"type": "int", "default": 320, "min": 16, "label": "Block size (samples)"},
            "mu": {"type": "float", "default": 0.5, "min": 0.0, "max": 1.0, "label": "Normalized step size"},
            "delta": {"type": "float", "default": 1e-6, "min": 1e-12, "label": "Normalization regularizer"},
            "sample_rate": {"type": "int", "default": 16000, "min": 1, "label": "Sample rate (Hz)"},
        }

    def process(self, x_frame, d_frame) -> AecFrameOut:
        """One block: y from the current taps, e = d - y, then the constrained update."""
        x_frame = np.asarray(x_frame, dtype=np.float64)
        d_frame = np.asarray(d_frame, dtype=np.float64)
        if x_frame.shape != (self.block,) or d_frame.shape != (self.block,):
            raise ShapeError(f"[{self.name}] Frames must have {self.block} samples, got {x_frame.shape} and {d_frame.shape}.")
        if not (np.all(np.isfinite(x_frame)) and np.all(np.isfinite(d_frame))):
            raise ProcessingError(f"[{self.name}] Non-finite samples in input frame {self.frames_processed}.")

        X = sp_fft.rfft(np.concatenate([self._x_prev, x_frame]))
        X_hist = np.concatenate([X[None, :], self.X_hist[:-1]], axis=0)

        Y = np.sum(self.W * X_hist, axis=0)
        y = sp_fft.irfft(Y, n=self.fft_size)[self.block:]
        e = d_frame - y

        if self.mu > 0 and np.mean(x_frame ** 2) >= FREEZE_POWER:
            E = sp_fft.rfft(np.concatenate([np.zeros(self.block), e]))
            power = np.sum(np.abs(X_hist) ** 2, axis=0)
            W = self.W + 2.0 * self.mu * np.conj(X_hist) * (E / (power + self.delta))[None, :]
            # Gradient constraint: keep only the first N taps of every partition
            w = sp_fft.irfft(W, n=self.fft_size, axis=-1)
            w[:, self.block:] = 0.0
            self.W = sp_fft.rfft(w, axis=-1)
            self.power = power
            self.frames_adapted += 1

        self.X_hist = X_hist
        self._x_prev = x_frame.copy()
        self.frames_processed += 1
        return AecFrameOut(e_frame=e, y_frame=y)

    def process_signal(self, x, d):
        """Runs whole signals block by block; a trailing partial block is zero-padded and cropped."""
        x = np.asarray(x, dtype=np.float64)
        d = np.asarray(d, dtype=np.float64)
        if x.shape != d.shape:
            raise ShapeError(f"[{self.name}] x {x.shape} and d {d.shape} must have equal length.")
        n = d.shape[0]
        n_blocks = -(-n // self.block)
        pad = n_blocks * self.block - n
        x_pad = np.concatenate([x, np.zeros(pad)])
        d_pad = np.concatenate([d, np.zeros(pad)])
        e = np.empty(n_blocks * self.block)
        y = np.empty(n_blocks * self.block)
        for b in range(n_blocks):
            sl = slice(b * self.block, (b + 1) * self.block)
            out = self.process(x_pad[sl], d_pad[sl])
            e[sl] = out.e_frame
            y[sl] = out.y_frame
        return e[:n], y[:n]

    def taps(self) -> np.ndarray:
        """Time-domain impulse response of the current filter, K * N taps."""
        return sp_fft.irfft(self.W, n=self.fft_size, axis=-1)[:, :self.block].reshape(-1)

    def tap_norm(self) -> float:
        return float(np.linalg.norm(self.taps()))

    def snapshot_bytes(self) -> bytes:
        return self.taps().astype("<f4").tobytes()
