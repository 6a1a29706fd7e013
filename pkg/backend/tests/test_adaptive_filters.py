# backend/tests/test_adaptive_filters.py
import numpy as np
import pytest
from scipy.linalg import solve_toeplitz
from scipy.signal import lfilter

from backend.exceptions import ConfigurationError, ProcessingError, ShapeError
from backend.models import AudioBuffer, Spectrogram
from backend.services import aec_service
from backend.services.metrics_service import erle, erle_track, frames_to_erle
from backend.services.signal_service import istft, n_frames, stft

FS = 16000
STEADY = slice(5 * FS, 7 * FS)


def _segment_erle(d, e, sl=STEADY) -> float:
    return erle(AudioBuffer(d[sl], FS), AudioBuffer(e[sl], FS)).erle_db


@pytest.fixture(scope="module")
def mdf_run(echo_scenario):
    return aec_service.run_mdf(echo_scenario["x"], echo_scenario["d"])


@pytest.fixture(scope="module")
def wrls_run(echo_scenario):
    return aec_service.run_wrls(echo_scenario["x"], echo_scenario["d"])


# --- Loader ---
def test_loader_resolves_registered_filters():
    assert aec_service.load_filter_class("mdf").__name__ == "MdfFilter"
    assert aec_service.load_filter_class("WRLS").__name__ == "WrlsFilter"
    with pytest.raises(ConfigurationError):
        aec_service.load_filter_class("kalman")


def test_filter_details_lists_parameters():
    details = aec_service.get_filter_details("mdf")
    assert details["status"] == "success"
    assert set(details["parameters_definition"]) == {"tail_ms", "block_samples", "mu", "delta", "sample_rate"}
    assert aec_service.get_filter_details("nope")["status"] == "error"


def test_run_filter_none_passes_through(rng):
    x = rng.standard_normal(1000)
    d = rng.standard_normal(1000)
    e, y, state = aec_service.run_filter("none", x, d, return_state=True)
    assert np.array_equal(e, d) and not np.any(y) and state is None


# --- MDF ---
@pytest.mark.parametrize("tail_ms, partitions", [(300.0, 15), (20.0, 1), (25.0, 2)])
def test_mdf_partition_count(tail_ms, partitions):
    assert aec_service.mdf_create(tail_ms=tail_ms).partitions == partitions


def test_mdf_rejects_bad_parameters():
    with pytest.raises(ConfigurationError):
        aec_service.mdf_create(mu=-0.1)
    with pytest.raises(ConfigurationError):
        aec_service.mdf_create(delta=0.0)


def test_mdf_error_plus_estimate_is_microphone(mdf_run, echo_scenario):
    e, y, _ = mdf_run
    d = echo_scenario["d"]
    assert np.max(np.abs(e + y - d)) <= 1e-9 * np.max(np.abs(d))


def test_mdf_converges_near_least_squares_oracle(mdf_run, echo_scenario):
    """Steady-state ERLE within 10 dB of a 128-tap Wiener fit, and at least 30 dB."""
    x, d = echo_scenario["x"], echo_scenario["d"]
    e, _, _ = mdf_run
    seg_x = x[STEADY]
    r = np.array([np.dot(seg_x[:len(seg_x) - k], seg_x[k:]) for k in range(128)])
    p = np.array([np.dot(d[STEADY][k:], seg_x[:len(seg_x) - k]) for k in range(128)])
    h = solve_toeplitz(r, p)
    oracle_e = d - lfilter(h, [1.0], x)
    oracle = _segment_erle(d, oracle_e)
    achieved = _segment_erle(d, e)
    assert achieved >= 30.0
    assert achieved >= oracle - 10.0


def test_mdf_taps_match_echo_path(mdf_run, echo_scenario):
    _, _, state = mdf_run
    taps = state.taps()
    path = echo_scenario["path"]
    mismatch = np.sum((taps[:100] - path) ** 2) / np.sum(path ** 2)
    assert mismatch < 0.01
    assert np.sum(taps[100:] ** 2) < 0.01 * np.sum(path ** 2)


def test_mdf_silent_reference_keeps_taps(rng):
    state = aec_service.mdf_create()
    d = rng.standard_normal(320)
    out = aec_service.mdf_process(state, np.zeros(320), d)
    assert not np.any(out.y_frame)
    assert np.array_equal(out.e_frame, d)
    assert not np.any(state.W)
    assert state.frames_adapted == 0


def test_mdf_zero_step_never_adapts(rng):
    state = aec_service.mdf_create(mu=0.0)
    for _ in range(5):
        state.process(rng.standard_normal(320), rng.standard_normal(320))
    assert state.frames_adapted == 0 and state.tap_norm() == 0.0


def test_mdf_nan_frame_leaves_state_untouched(rng):
    state = aec_service.mdf_create()
    state.process(rng.standard_normal(320), rng.standard_normal(320))
    W = state.W.copy()
    bad = rng.standard_normal(320)
    bad[3] = np.nan
    with pytest.raises(ProcessingError):
        state.process(bad, rng.standard_normal(320))
    assert state.frames_processed == 1
    assert np.array_equal(state.W, W)


def test_mdf_frame_shape_checked():
    with pytest.raises(ShapeError):
        aec_service.mdf_create().process(np.zeros(160), np.zeros(160))


def test_mdf_double_talk_keeps_bounded_taps(echo_scenario):
    """Near-end speech at 0 dB SER must not blow up the filter."""
    gen = np.random.default_rng(21)
    near = gen.standard_normal(len(echo_scenario["d"])) * np.sqrt(np.mean(echo_scenario["echo"] ** 2))
    d = echo_scenario["d"] + near
    e, y, state = aec_service.run_mdf(echo_scenario["x"], d)
    assert np.all(np.isfinite(e))
    assert state.tap_norm() < 10.0 * np.linalg.norm(echo_scenario["path"])


# --- Parameter handling ---
def test_unknown_parameters_are_rejected():
    with pytest.raises(ConfigurationError):
        aec_service.create_filter("wrls", block_samples=160)
    with pytest.raises(ConfigurationError):
        aec_service.create_filter("mdf", step=0.1)
    with pytest.raises(ConfigurationError):
        aec_service.create_filter("wrls", L=4, taps=5)


def test_short_parameter_names_reach_the_filter(rng):
    state = aec_service.create_filter("wrls", L=4, lam=0.99)
    assert state.L == 4 and state.lam == 0.99
    x = rng.standard_normal(1600)
    *_, run_state = aec_service.run_wrls(x, x, lam=0.99999, L=2)
    assert run_state.lam == 0.99999 and run_state.L == 2


# --- wRLS ---
def test_wrls_dimensions_and_validation():
    state = aec_service.wrls_create()
    assert state.n_bins == 161 and state.M == 30
    assert state.W.shape == (161, 30) and state.P.shape == (161, 30, 30)
    band_only = aec_service.wrls_create(crossband=0)
    assert band_only.W.shape == (161, 10) and band_only.P.shape == (161, 10, 10)
    with pytest.raises(ConfigurationError):
        aec_service.wrls_create(delta_init=0.0)
    with pytest.raises(ConfigurationError):
        aec_service.wrls_create(lam=1.0)
    with pytest.raises(ConfigurationError):
        aec_service.wrls_create(L=0)
    with pytest.raises(ConfigurationError):
        aec_service.wrls_create(crossband=-1)


def test_wrls_regressors_mirror_edge_bins(rng):
    state = aec_service.wrls_create(L=3)
    hist = rng.standard_normal((161, 3)) + 1j * rng.standard_normal((161, 3))
    U = state.regressors(hist)
    assert U.shape == (161, 9)
    assert np.array_equal(U[0, :3], np.conj(hist[1]))
    assert np.array_equal(U[0, 3:6], hist[0])
    assert np.array_equal(U[160, 6:], np.conj(hist[159]))
    assert np.array_equal(U[5, :3], hist[4]) and np.array_equal(U[5, 6:], hist[6])


def test_wrls_first_frame_estimate_is_zero(rng):
    state = aec_service.wrls_create()
    X = stft(AudioBuffer(rng.standard_normal(320), FS)).data[0]
    D = stft(AudioBuffer(rng.standard_normal(320), FS)).data[0]
    E, Y = aec_service.wrls_process(state, X, D)
    assert not np.any(Y)
    assert np.array_equal(E, D)
    assert state.frames_adapted == 1


def test_wrls_silent_reference_passes_microphone(rng):
    state = aec_service.wrls_create()
    D = stft(AudioBuffer(rng.standard_normal(320), FS)).data[0]
    E, Y = state.process_spectra(np.zeros(161, dtype=complex), D)
    assert not np.any(Y) and np.array_equal(E, D)
    assert state.frames_adapted == 0


def test_wrls_error_plus_estimate_is_microphone(wrls_run, echo_scenario):
    e, y, E, Y, state = wrls_run
    d = echo_scenario["d"]
    assert np.max(np.abs(e + y - d)) <= 1e-9 * np.max(np.abs(d))
    D = stft(AudioBuffer(d, FS)).data
    assert E.data.shape == Y.data.shape == D.shape == (n_frames(len(d)), 161)
    assert np.max(np.abs(E.data + Y.data - D)) <= 1e-9 * np.max(np.abs(D))


def test_wrls_inverse_correlation_stays_positive_definite(wrls_run):
    state = wrls_run[-1]
    assert state.reinit_events == 0
    P = state.P[::20]
    assert np.allclose(P, np.conj(np.transpose(P, (0, 2, 1))))
    assert np.all(np.linalg.eigvalsh(P) > 0)


def test_wrls_cancels_and_converges_faster_than_mdf(wrls_run, mdf_run, echo_scenario):
    x_d = AudioBuffer(echo_scenario["d"], FS)
    wrls_e = wrls_run[0]
    mdf_e = mdf_run[0]
    assert _segment_erle(echo_scenario["d"], wrls_e) >= 30.0
    wrls_frames = frames_to_erle(erle_track(x_d, AudioBuffer(wrls_e, FS)), 20.0)
    mdf_frames = frames_to_erle(erle_track(x_d, AudioBuffer(mdf_e, FS)), 20.0)
    assert wrls_frames is not None and mdf_frames is not None
    assert wrls_frames < mdf_frames


def test_wrls_without_forgetting_matches_per_bin_least_squares(echo_scenario):
    """With lambda close to 1 the steady-state ERLE is within 1 dB of the batch per-bin fit."""
    x, d = echo_scenario["x"], echo_scenario["d"]
    e, _, _, _, state = aec_service.run_wrls(x, d, lam=0.99999)

    X = stft(AudioBuffer(x, FS)).data
    D = stft(AudioBuffer(d, FS)).data
    padded = np.vstack([np.zeros((state.L - 1, state.n_bins), dtype=complex), X])
    U = np.stack([state.regressors(padded[t:t + state.L][::-1].T) for t in range(X.shape[0])])
    W = np.stack([np.linalg.lstsq(U[:, k, :], D[:, k], rcond=None)[0] for k in range(state.n_bins)])
    Y_oracle = np.einsum("tkm,km->tk", U, W)
    y_oracle = istft(Spectrogram(data=Y_oracle), length=len(d)).samples

    achieved = _segment_erle(d, e)
    oracle = _segment_erle(d, d - y_oracle)
    assert abs(achieved - oracle) <= 1.0


def test_wrls_double_talk_keeps_bounded_taps(wrls_run, echo_scenario):
    gen = np.random.default_rng(21)
    near = gen.standard_normal(len(echo_scenario["d"])) * np.sqrt(np.mean(echo_scenario["echo"] ** 2))
    d = echo_scenario["d"] + near
    e, y, _, _, state = aec_service.run_wrls(echo_scenario["x"], d)
    assert np.all(np.isfinite(e))
    assert state.reinit_events == 0
    assert state.tap_norm() < 3.0 * wrls_run[-1].tap_norm()
    assert np.sum(e ** 2) <= np.sum(d ** 2) + np.sum(y ** 2)


def test_wrls_non_finite_spectrum_rejected():
    state = aec_service.wrls_create()
    X = np.zeros(161, dtype=complex)
    X[5] = np.inf
    with pytest.raises(ProcessingError):
        state.process_spectra(X, np.zeros(161, dtype=complex))
    assert state.frames_processed == 0


def test_wrls_snapshot_holds_real_and_imaginary_parts(wrls_run):
    state = wrls_run[-1]
    blob = np.frombuffer(state.snapshot_bytes(), dtype="<f4")
    assert blob.size == 2 * state.W.size
    assert np.allclose(blob[0::2].reshape(state.W.shape), state.W.real, atol=1e-5)
