# adaptive_filters/wrls_filter.py
import logging

import numpy as np

from backend.exceptions import ConfigurationError, ProcessingError, ShapeError
from backend.models import WIDEBAND_RATE, AudioBuffer, Spectrogram
from backend.schemas.signal_schemas import StftConfig
from backend.services.signal_service import DEFAULT_STFT, istft, stft

logger = logging.getLogger(__name__)

FREEZE_POWER = 1e-6
# Inverse correlations growing past this multiple of the initial scale are reset
P_GROWTH_LIMIT = 1e3
# Full eigenvalue check every this many adapted frames; diagonal checks run every frame
PD_CHECK_INTERVAL = 25


class WrlsFilter:
    """
    Per-bin recursive least squares on STFT frames.

    Bin k predicts D_k(t) from the last L frames of X_k and, with crossband c > 0, of the c
    neighbouring bins on each side: M = (2c + 1) * L complex taps and an M×M inverse
    correlation matrix per bin, updated with forgetting factor lambda. Bins beyond DC and
    Nyquist are the conjugate mirror bins of the real-signal spectrum.

    E = D - Y holds per bin; the frames are the ones the post-filter reads.
    """

    def __init__(self, taps: int = 10, forgetting: float = 0.999, delta_init: float = 1e-3,
                 crossband: int = 1, n_bins: int = DEFAULT_STFT.n_bins):
        if int(taps) < 1:
            raise ConfigurationError(f"wRLS needs L >= 1, got {taps}.")
        if not (0.0 < forgetting < 1.0):
            raise ConfigurationError(f"wRLS forgetting factor must lie in (0, 1), got {forgetting}.")
        if delta_init <= 0:
            raise ConfigurationError(f"wRLS delta_init must be positive, got {delta_init}.")
        if int(n_bins) < 3 or not (0 <= int(crossband) < int(n_bins) - 1):
            raise ConfigurationError(f"wRLS needs 0 <= crossband < n_bins - 1, got {crossband} with {n_bins} bins.")
        self.L = int(taps)
        self.lam = float(forgetting)
        self.delta_init = float(delta_init)
        self.crossband = int(crossband)
        self.n_bins = int(n_bins)
        self.fft_size = 2 * (self.n_bins - 1)
        self.M = (2 * self.crossband + 1) * self.L

        self.W = np.zeros((self.n_bins, self.M), dtype=np.complex128)
        self.X_hist = np.zeros((self.n_bins, self.L), dtype=np.complex128)
        self.P = np.repeat(self._initial_inverse()[None, :, :], self.n_bins, axis=0)
        self.frames_processed = 0
        self.frames_adapted = 0
        self.reinit_events = 0

        self.name = f"wRLS (L={self.L}, crossband={self.crossband}, bins={self.n_bins})"
        logger.info(f"[{self.name}] Initialized: lambda={self.lam}, delta_init={self.delta_init}")

    @classmethod
    def get_parameters_definition(cls):
        return {
            "taps": {"type": "int", "default": 10, "min": 1, "max": 64, "label": "Frame taps per bin (L)"},
            "forgetting": {"type": "float", "default": 0.999, "min": 0.9, "max": 0.99999, "label": "Forgetting factor"},
            "delta_init": {"type": "float", "default": 1e-3, "min": 1e-9, "label": "Initial inverse-correlation scale"},
            "crossband": {"type": "int", "default": 1, "min": 0, "max": 4, "label": "Neighbour bins per side"},
            "n_bins": {"type": "int", "default": DEFAULT_STFT.n_bins, "min": 3, "label": "STFT bins"},
        }

    def _initial_inverse(self) -> np.ndarray:
        return np.eye(self.M, dtype=np.complex128) / self.delta_init

    # --- Regressors ---
    def regressors(self, X_hist: np.ndarray) -> np.ndarray:
        """
        X_hist: bins × L frame history (newest first). Returns bins × M regressors ordered
        [neighbour offset -c..c][lag].
        """
        c = self.crossband
        if c == 0:
            return X_hist
        mirrored = np.concatenate([np.conj(X_hist[c:0:-1]), X_hist, np.conj(X_hist[-2:-2 - c:-1])], axis=0)
        return np.concatenate([mirrored[o:o + self.n_bins] for o in range(2 * c + 1)], axis=1)

    # --- Processing ---
    def process_spectra(self, X_frame, D_frame):
        """
        One STFT frame: X_frame far-end, D_frame microphone, both n_bins complex.
        Returns (E_frame, Y_frame) from the a priori taps, then adapts.
        """
        X_frame = np.asarray(X_frame, dtype=np.complex128)
        D_frame = np.asarray(D_frame, dtype=np.complex128)
        if X_frame.shape != (self.n_bins,) or D_frame.shape != (self.n_bins,):
            raise ShapeError(f"[{self.name}] Spectra must have {self.n_bins} bins, got {X_frame.shape} and {D_frame.shape}.")
        if not (np.all(np.isfinite(X_frame)) and np.all(np.isfinite(D_frame))):
            raise ProcessingError(f"[{self.name}] Non-finite spectrum in frame {self.frames_processed}.")

        X_hist = np.concatenate([X_frame[:, None], self.X_hist[:, :-1]], axis=1)
        U = self.regressors(X_hist)
        Y_frame = np.sum(self.W * U, axis=1)
        E_frame = D_frame - Y_frame

        # Parseval: mean power of the windowed far-end frame
        power = (np.abs(X_frame[0]) ** 2 + np.abs(X_frame[-1]) ** 2
                 + 2.0 * np.sum(np.abs(X_frame[1:-1]) ** 2)) / self.fft_size ** 2
        if power >= FREEZE_POWER:
            self._update(U, E_frame)
            self.frames_adapted += 1

        self.X_hist = X_hist
        self.frames_processed += 1
        return E_frame, Y_frame

    def _update(self, U: np.ndarray, E: np.ndarray) -> None:
        # Y = U^T w per bin; with v = conj(U) this is standard complex RLS, R = sum lambda^n v v^H
        v = np.conj(U)
        Pv = np.matmul(self.P, v[:, :, None])[:, :, 0]
        denom = self.lam + np.real(np.sum(U * Pv, axis=1))
        k = Pv / denom[:, None]
        self.W = self.W + k * E[:, None]
        P = (self.P - k[:, :, None] * np.conj(Pv)[:, None, :]) / self.lam
        self.P = 0.5 * (P + np.conj(np.transpose(P, (0, 2, 1))))
        self._check_inverse_correlation()

    def _check_inverse_correlation(self) -> None:
        diag = np.real(np.diagonal(self.P, axis1=1, axis2=2))
        bad = ~np.all(np.isfinite(self.P), axis=(1, 2))
        bad |= np.any(diag <= 0, axis=1) | (np.max(diag, axis=1) > P_GROWTH_LIMIT / self.delta_init)
        if self.frames_adapted % PD_CHECK_INTERVAL == 0:
            ok = ~bad
            if np.any(ok):
                min_eig = np.linalg.eigvalsh(self.P[ok])[:, 0]
                bad[np.flatnonzero(ok)[min_eig <= 0]] = True
        if np.any(bad):
            n_bad = int(np.count_nonzero(bad))
            self.P[bad] = self._initial_inverse()[None, :, :]
            self.reinit_events += n_bad
            logger.warning(f"[{self.name}] Inverse correlation lost positive definiteness in {n_bad} bin(s) "
                           f"at frame {self.frames_processed}; re-initialized ({self.reinit_events} total).")

    def process_signal(self, x, d, return_spectra: bool = False, stft_config: StftConfig = DEFAULT_STFT):
        """
        Whole-signal driver on the 16 kHz band. y is the overlap-add of the Y frames and
        e = d - y, so e + y == d in the time domain as well. With return_spectra the E and Y
        frames (frames × bins, aligned with stft(d)) are returned too.
        """
        x = np.asarray(x, dtype=np.float64)
        d = np.asarray(d, dtype=np.float64)
        if x.shape != d.shape:
            raise ShapeError(f"[{self.name}] x {x.shape} and d {d.shape} must have equal length.")
        if stft_config.n_bins != self.n_bins:
            raise ConfigurationError(f"[{self.name}] STFT has {stft_config.n_bins} bins, filter has {self.n_bins}.")
        X = stft(AudioBuffer(x, WIDEBAND_RATE), stft_config).data
        D = stft(AudioBuffer(d, WIDEBAND_RATE), stft_config).data
        E_frames = np.empty_like(D)
        Y_frames = np.empty_like(D)
        for t in range(D.shape[0]):
            E_frames[t], Y_frames[t] = self.process_spectra(X[t], D[t])
        y = istft(Spectrogram(data=Y_frames, hop=stft_config.hop, fft_size=stft_config.fft_size),
                  stft_config, length=len(d)).samples
        e = d - y
        if return_spectra:
            return e, y, E_frames, Y_frames
        return e, y

    def taps(self) -> np.ndarray:
        """Per-bin complex taps, bins × M."""
        return self.W.copy()

    def tap_norm(self) -> float:
        return float(np.linalg.norm(self.W))

    def snapshot_bytes(self) -> bytes:
        return np.stack([self.W.real, self.W.imag], axis=-1).astype("<f4").tobytes()
