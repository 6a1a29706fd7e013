# backend/tests/test_tde_service.py
import numpy as np
import pytest

from backend.exceptions import ConfigurationError, EmptyInputError
from backend.models import AudioBuffer
from backend.schemas.signal_schemas import DelayEstimate
from backend.services import tde_service as tde
from backend.services.signal_service import delay_buffer

FS = 16000


def _pair(k: int, seed: int = 3, seconds: float = 3.0, snr_db: float = 20.0):
    gen = np.random.default_rng(seed)
    x = gen.standard_normal(int(seconds * FS))
    d = delay_buffer(x, k)
    d = d + gen.standard_normal(len(d)) * np.sqrt(np.mean(x ** 2)) * 10 ** (-snr_db / 20)
    return AudioBuffer(x, FS), AudioBuffer(d, FS)


@pytest.mark.parametrize("k", [0, 160, 1600, 8000, 16000])
def test_recovers_integer_delay(k):
    x, d = _pair(k)
    est = tde.estimate_delay(x, d)
    assert est.delay == k
    assert est.reliable
    assert est.confidence >= 2.0


def test_independent_noise_is_unreliable():
    gen = np.random.default_rng(11)
    x = AudioBuffer(gen.standard_normal(3 * FS), FS)
    d = AudioBuffer(gen.standard_normal(3 * FS), FS)
    est = tde.estimate_delay(x, d)
    assert est.confidence < 2.0
    assert not est.reliable


def test_cross_spectrum_sign_convention():
    """d = x delayed by k peaks at lag +k of irfft(D conj(X))."""
    gen = np.random.default_rng(5)
    x = gen.standard_normal(1024)
    d = delay_buffer(x, 37)
    spectrum, valid = tde.gcc_phat_cross_spectrum(x, d, 2048)
    assert valid
    cc = np.fft.irfft(spectrum, n=2048)
    assert int(np.argmax(cc)) == 37


def test_silent_blocks_are_skipped():
    est = tde.GccPhatEstimator(block_len=1024, max_delay=100)
    est.update(np.zeros(1024), np.ones(1024))
    assert est.blocks_skipped == 1 and est.blocks_used == 0
    assert est.estimate() == DelayEstimate(delay=0, confidence=0.0, reliable=False, blocks_used=0)


def test_streaming_mode_uses_preamble():
    x, d = _pair(480, seconds=6.0)
    est = tde.estimate_delay(x, d, max_delay=2000, mode="streaming")
    assert est.delay == 480


def test_short_input_and_bad_mode():
    short = AudioBuffer(np.ones(1000), FS)
    with pytest.raises(EmptyInputError):
        tde.estimate_delay(short, short)
    x, d = _pair(0, seconds=1.0)
    with pytest.raises(ConfigurationError):
        tde.estimate_delay(x, d, mode="batch")


def test_align_shifts_and_pads():
    x = AudioBuffer(np.arange(1.0, 6.0), FS)
    out = tde.align(x, DelayEstimate(delay=2, confidence=5.0, reliable=True), length=6)
    assert np.array_equal(out.samples, [0.0, 0.0, 1.0, 2.0, 3.0, 4.0])


def test_identical_blocks_have_zero_phase():
    x = np.random.default_rng(1).standard_normal(256)
    spectrum, valid = tde.gcc_phat_cross_spectrum(x, x, 512)
    assert valid
    assert np.allclose(np.abs(spectrum), 1.0)
    assert np.allclose(np.angle(spectrum), 0.0, atol=1e-9)


@pytest.mark.parametrize("scale", [1e-2, 30.0])
def test_delay_ignores_input_amplitude(scale):
    x, d = _pair(1600)
    base = tde.estimate_delay(x, d)
    scaled = tde.estimate_delay(x.with_samples(scale * x.samples), d.with_samples(scale * d.samples))
    quiet_mic = tde.estimate_delay(x, d.with_samples(scale * d.samples))
    assert scaled.delay == quiet_mic.delay == base.delay == 1600
    assert scaled.confidence == pytest.approx(base.confidence, rel=1e-6)


def test_aligned_reference_has_zero_delay():
    x, d = _pair(800)
    est = tde.estimate_delay(x, d)
    aligned = tde.align(x, est, length=len(d))
    again = tde.estimate_delay(aligned, d)
    assert again.delay == 0
    assert again.reliable
