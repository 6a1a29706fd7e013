# backend/services/subband_service.py
import logging
from functools import lru_cache

import numpy as np
from scipy.optimize import minimize_scalar
from scipy.signal import firwin, freqz, lfilter

from backend.exceptions import ConfigurationError, ShapeError
from backend.models import FULLBAND_RATE, WIDEBAND_RATE, AudioBuffer, Filterbank, GainTrack, RealArray, Spectrogram, SubbandSignal
from backend.schemas.signal_schemas import GainBandConfig, StftConfig
from backend.services.signal_service import DEFAULT_STFT, delay_buffer, istft

logger = logging.getLogger(__name__)

# --- Configuration ---
N_BANDS = 3
DEFAULT_TAPS = 96
KAISER_BETA = 9.0
# Search range of the prototype cutoff, relative to the nominal pi / (2 * bands)
CUTOFF_SEARCH = (0.6, 1.5)
DEFAULT_GAIN_BANDS = GainBandConfig()


# --- Design ---
def _prototype(taps: int, cutoff: float, beta: float) -> RealArray:
    # cutoff is relative to Nyquist
    return firwin(taps, cutoff, window=("kaiser", beta))


def _power_complementarity_error(prototype: RealArray, bands: int, n_points: int = 512) -> float:
    """max |P(w)|^2 + |P(pi/M - w)|^2 - 1 over [0, pi/M]; zero for a perfect pseudo-QMF prototype."""
    w = np.linspace(0.0, np.pi / bands, n_points)
    _, lower = freqz(prototype, worN=w)
    _, upper = freqz(prototype, worN=np.pi / bands - w)
    return float(np.max(np.abs(np.abs(lower) ** 2 + np.abs(upper) ** 2 - 1.0)))


@lru_cache(maxsize=8)
def design_filterbank(taps_per_band: int = DEFAULT_TAPS, beta: float = KAISER_BETA) -> Filterbank:
    """
    3-band cosine-modulated bank from a Kaiser-windowed sinc prototype. The prototype
    cutoff is tuned so that adjacent shifted responses are power complementary.
    """
    if taps_per_band < 32 or taps_per_band % 2:
        raise ConfigurationError(f"taps_per_band must be even and >= 32, got {taps_per_band}.")
    m = N_BANDS
    nominal = 1.0 / (2 * m)
    result = minimize_scalar(
        lambda cutoff: _power_complementarity_error(_prototype(taps_per_band, cutoff, beta), m),
        bounds=(CUTOFF_SEARCH[0] * nominal, CUTOFF_SEARCH[1] * nominal),
        method="bounded",
        options={"xatol": 1e-7},
    )
    prototype = _prototype(taps_per_band, float(result.x), beta)

    n = np.arange(taps_per_band)
    centre = (taps_per_band - 1) / 2.0
    analysis = np.empty((m, taps_per_band))
    synthesis = np.empty((m, taps_per_band))
    for k in range(m):
        arg = (2 * k + 1) * np.pi / (2 * m) * (n - centre)
        phase = (-1) ** k * np.pi / 4
        analysis[k] = 2.0 * prototype * np.cos(arg + phase)
        # Gain m compensates the 1/m of decimation followed by zero-stuffing
        synthesis[k] = 2.0 * m * prototype * np.cos(arg - phase)

    for arr in (prototype, analysis, synthesis):
        arr.setflags(write=False)
    logger.info(f"[Subband] Designed {m}-band bank: {taps_per_band} taps, cutoff {float(result.x):.5f}, "
                f"power-complementarity error {result.fun:.2e}, group delay {taps_per_band - 1} samples.")
    return Filterbank(prototype=prototype, analysis=analysis, synthesis=synthesis, bands=m, decimation=m)


# --- Streaming analysis / synthesis ---
class SubbandStream:
    """Per-stream FIR state so split and synthesis can run chunk by chunk."""

    def __init__(self, fb: Filterbank):
        self.fb = fb
        self._analysis_zi = np.zeros((fb.bands, fb.taps - 1))
        self._synthesis_zi = np.zeros((fb.bands, fb.taps - 1))
        self._consumed = 0

    def analyze(self, x: RealArray) -> RealArray:
        """Full-band chunk -> bands × subband samples (decimation phase kept across chunks)."""
        x = np.asarray(x, dtype=np.float64)
        m = self.fb.decimation
        start = (-self._consumed) % m
        n_sub = len(range(start, x.shape[0], m))
        out = np.empty((self.fb.bands, n_sub))
        for k in range(self.fb.bands):
            filtered, self._analysis_zi[k] = lfilter(self.fb.analysis[k], [1.0], x, zi=self._analysis_zi[k])
            out[k] = filtered[start::m]
        self._consumed += x.shape[0]
        return out

    def synthesize(self, bands: RealArray) -> RealArray:
        """Bands × subband samples -> full-band chunk of length n_sub * decimation."""
        bands = np.asarray(bands, dtype=np.float64)
        if bands.ndim != 2 or bands.shape[0] != self.fb.bands:
            raise ShapeError(f"Expected {self.fb.bands} subband rows, got shape {bands.shape}.")
        m = self.fb.decimation
        out = np.zeros(bands.shape[1] * m)
        upsampled = np.zeros(bands.shape[1] * m)
        for k in range(self.fb.bands):
            upsampled[::m] = bands[k]
            filtered, self._synthesis_zi[k] = lfilter(self.fb.synthesis[k], [1.0], upsampled, zi=self._synthesis_zi[k])
            out += filtered
        return out


def split(full: AudioBuffer, fb: Filterbank) -> SubbandSignal:
    if full.sample_rate != FULLBAND_RATE:
        raise ConfigurationError(f"Subband split needs {FULLBAND_RATE} Hz input, got {full.sample_rate} Hz.")
    bands = SubbandStream(fb).analyze(full.samples)
    wide = AudioBuffer(samples=bands[0], sample_rate=WIDEBAND_RATE)
    return SubbandSignal(wide=wide, high=bands[1:].copy(), n_full=len(full))


def band_energy_fractions(full: AudioBuffer, fb: Filterbank) -> RealArray:
    """Share of subband-domain energy per band."""
    if full.sample_rate != FULLBAND_RATE:
        raise ConfigurationError(f"Band energy measurement needs {FULLBAND_RATE} Hz input, got {full.sample_rate} Hz.")
    energies = np.sum(SubbandStream(fb).analyze(full.samples) ** 2, axis=1)
    total = np.sum(energies)
    return energies / total if total > 0 else np.zeros_like(energies)


# --- High-band gain ---
def highband_gain(S_hat: Spectrogram, D: Spectrogram, cfg: GainBandConfig = DEFAULT_GAIN_BANDS) -> GainTrack:
    """
    g(t) = min over the two bands of sum|S_hat| / sum|D|, clamped to [0, g_max].
    A band whose D sum is below eps is left out; with both below eps the frame gain is 0.
    """
    if S_hat.data.shape != D.data.shape:
        raise ShapeError(f"S_hat {S_hat.data.shape} and D {D.data.shape} must share T and F.")
    if cfg.d > D.n_bins:
        raise ConfigurationError(f"Gain band upper edge {cfg.d} exceeds {D.n_bins} bins.")
    s_mag = np.abs(S_hat.data)
    d_mag = np.abs(D.data)

    ratios = []
    valid = []
    for lo, hi in ((cfg.a, cfg.b), (cfg.c, cfg.d)):
        num = s_mag[:, lo - 1:hi].sum(axis=1)
        den = d_mag[:, lo - 1:hi].sum(axis=1)
        ok = den >= cfg.eps
        ratios.append(np.divide(num, den, out=np.zeros_like(num), where=ok))
        valid.append(ok)

    g = np.where(valid[0] & valid[1], np.minimum(ratios[0], ratios[1]),
                 np.where(valid[0], ratios[0], np.where(valid[1], ratios[1], 0.0)))
    return GainTrack(g=np.clip(g, 0.0, cfg.g_max), hop=S_hat.hop)


def expand_gain(g: GainTrack, n_samples: int) -> RealArray:
    """Sample-and-hold of the frame gains at the subband rate; the tail keeps the last gain."""
    if len(g) == 0:
        return np.zeros(n_samples)
    idx = np.minimum(np.arange(n_samples) // g.hop, len(g) - 1)
    return g.g[idx]


# --- Synthesis ---
def synthesize(S_hat: Spectrogram, sub: SubbandSignal, g: GainTrack, fb: Filterbank,
               cfg: StftConfig = DEFAULT_STFT, latency: int = 0) -> AudioBuffer:
    """
    Wide band from istft(S_hat), high bands scaled by g(t), then the synthesis bank.
    latency delays every band by that many subband samples before synthesis.
    """
    if len(g) != S_hat.n_frames:
        raise ShapeError(f"Gain track has {len(g)} frames, S_hat has {S_hat.n_frames}.")
    n_sub = sub.high.shape[1]
    if len(sub.wide) != n_sub or sub.high.shape[0] != fb.bands - 1:
        raise ShapeError(f"Subband signal is inconsistent: wide {len(sub.wide)}, high {sub.high.shape}.")
    wide = istft(S_hat, cfg, length=n_sub).samples
    gain = expand_gain(g, n_sub)
    bands = np.vstack([wide[None, :], sub.high * gain[None, :]])
    if latency > 0:
        bands = np.stack([delay_buffer(row, latency) for row in bands])
    out = SubbandStream(fb).synthesize(bands)[:sub.n_full]
    return AudioBuffer(samples=out, sample_rate=FULLBAND_RATE)
