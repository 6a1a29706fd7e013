# backend/tests/test_pipeline_service.py
import math
import os

import numpy as np
import pytest

from backend.exceptions import ConfigurationError
from backend.models import AudioBuffer
from backend.schemas.pipeline_schemas import PipelineConfig
from backend.schemas.simulation_schemas import SimulationGrid
from backend.services import pipeline_service as pipeline
from backend.services import simulation_service as sim
from backend.services.signal_service import delay_buffer, read_wav, write_wav

FS = 16000


def _dsp_config(**overrides) -> PipelineConfig:
    values = dict(filter="wrls", tde=False, combo=None, model_path=None, subband=False, workers=1)
    values.update(overrides)
    return PipelineConfig(**values)


def _impulse(n: int, at: int, rate: int) -> AudioBuffer:
    x = np.zeros(n)
    x[at] = 1.0
    return AudioBuffer(x, rate)


# --- Configuration ---
def test_config_rejects_inconsistent_combinations():
    with pytest.raises(ValueError):
        PipelineConfig(filter="none", combo="DEY", random_model_seed=1)
    with pytest.raises(ValueError):
        PipelineConfig(filter="wrls", combo="DX", model_path=None, random_model_seed=None)
    with pytest.raises(ValueError):
        PipelineConfig(filter="wrls", colour="blue")
    assert PipelineConfig(filter="none", combo="none").combo is None


def test_config_file_and_overrides(tmp_path):
    path = tmp_path / "pipeline.json"
    path.write_text('{"filter": "mdf", "subband": false, "mdf": {"tail_ms": 200}}')
    config = PipelineConfig.from_sources(str(path), {"tde": False, "mode": None})
    assert config.filter == "mdf" and not config.subband and not config.tde
    assert config.mode == "offline"
    assert config.mdf.tail_ms == 200
    with pytest.raises(ConfigurationError):
        PipelineConfig.from_sources(str(tmp_path / "absent.json"))
    path.write_text('{"filtr": "mdf"}')
    with pytest.raises(ConfigurationError):
        PipelineConfig.from_sources(str(path))


def test_exit_codes():
    from backend.exceptions import AudioIOError, ModelLoadError
    assert pipeline.exit_code_for(ModelLoadError("x")) == pipeline.EXIT_MODEL
    assert pipeline.exit_code_for(ConfigurationError("x")) == pipeline.EXIT_USAGE
    assert pipeline.exit_code_for(AudioIOError("x")) == pipeline.EXIT_IO


# --- Latency ---
def test_wideband_identity_latency():
    config = _dsp_config(filter="none")
    out, report = pipeline.process_signals(_impulse(FS, 4000, FS), AudioBuffer(np.zeros(FS), FS), config)
    assert report.latency_samples == 480
    assert int(np.argmax(np.abs(out.samples))) == 4000 + 480
    assert out.samples[4480] == pytest.approx(1.0, abs=1e-9)


def test_subband_identity_latency():
    config = _dsp_config(filter="none", subband=True)
    n = 48000
    out, report = pipeline.process_signals(_impulse(n, 12000, n), AudioBuffer(np.zeros(n), n), config)
    assert report.latency_samples == 3 * 480 + 95
    assert len(out) == n
    assert int(np.argmax(np.abs(out.samples))) == 12000 + report.latency_samples


def test_rate_mismatch_is_an_io_error():
    config = _dsp_config()
    with pytest.raises(Exception) as err:
        pipeline.process_signals(AudioBuffer(np.zeros(FS), FS), AudioBuffer(np.zeros(3 * FS), 3 * FS), config)
    assert pipeline.exit_code_for(err.value) == pipeline.EXIT_IO


# --- Processing ---
def test_delay_is_estimated_and_compensated():
    gen = np.random.default_rng(8)
    x = 0.1 * gen.standard_normal(4 * FS)
    d = 0.5 * delay_buffer(x, 800)
    config = _dsp_config(tde=True)
    out, report = pipeline.process_signals(AudioBuffer(d, FS), AudioBuffer(x, FS), config)
    assert report.delay == 800
    assert report.alignment_applied
    lag = report.latency_samples
    tail = slice(2 * FS, 4 * FS - lag)
    residual = np.sum(out.samples[lag:][tail] ** 2) / np.sum(d[tail] ** 2)
    assert 10 * np.log10(residual) < -20.0


def test_random_postfilter_runs_deterministically():
    gen = np.random.default_rng(2)
    x = 0.1 * gen.standard_normal(FS)
    d = 0.3 * delay_buffer(x, 10) + 0.05 * gen.standard_normal(FS)
    config = _dsp_config(combo="DEY", random_model_seed=3, model_channels=8)
    out_a, report = pipeline.process_signals(AudioBuffer(d, FS), AudioBuffer(x, FS), config)
    out_b, _ = pipeline.process_signals(AudioBuffer(d, FS), AudioBuffer(x, FS), config)
    assert np.array_equal(out_a.samples, out_b.samples)
    assert np.all(np.isfinite(out_a.samples))
    assert "postfilter" in report.stages
    assert report.total_rtf > 0


def test_wrls_frames_feed_the_postfilter_without_reanalysis(monkeypatch):
    gen = np.random.default_rng(6)
    x = 0.1 * gen.standard_normal(FS)
    d = 0.3 * delay_buffer(x, 12) + 1e-3 * gen.standard_normal(FS)
    calls = []
    real_stft = pipeline.stft

    def counting_stft(buf, cfg):
        calls.append(len(buf))
        return real_stft(buf, cfg)

    monkeypatch.setattr(pipeline, "stft", counting_stft)
    config = _dsp_config(combo="DEY", random_model_seed=3, model_channels=8)
    pipeline.process_signals(AudioBuffer(d, FS), AudioBuffer(x, FS), config)
    # D and X only; E and Y come straight from the filter
    assert len(calls) == 2
    calls.clear()
    pipeline.process_signals(AudioBuffer(d, FS), AudioBuffer(x, FS), config.model_copy(update={"filter": "mdf"}))
    assert len(calls) == 4


def test_cmd_process_writes_output(tmp_path):
    gen = np.random.default_rng(4)
    x = 0.1 * gen.standard_normal(FS)
    mic, ref, out = (str(tmp_path / name) for name in ("mic.wav", "ref.wav", "out.wav"))
    write_wav(mic, AudioBuffer(0.5 * x, FS))
    write_wav(ref, AudioBuffer(x, FS))
    result = pipeline.cmd_process(mic, ref, out, _dsp_config(filter="mdf"))
    assert result["status"] == "success" and result["exit_code"] == 0
    written = read_wav(out)
    assert written.sample_rate == FS and len(written) == FS
    assert result["report"]["output_path"] == out


def test_cmd_process_error_codes(tmp_path):
    mic = str(tmp_path / "mic.wav")
    write_wav(mic, AudioBuffer(np.zeros(FS), FS))
    missing = pipeline.cmd_process(str(tmp_path / "nope.wav"), mic, str(tmp_path / "o.wav"), _dsp_config())
    assert missing["status"] == "error" and missing["exit_code"] == pipeline.EXIT_IO
    bad_model = _dsp_config(combo="DX", model_path=str(tmp_path / "absent.gftw"))
    model_result = pipeline.cmd_process(mic, mic, str(tmp_path / "o.wav"), bad_model)
    assert model_result["exit_code"] == pipeline.EXIT_MODEL
    assert not os.path.exists(tmp_path / "o.wav")


# --- Evaluation ---
@pytest.fixture(scope="module")
def far_end_testset(tmp_path_factory):
    out_dir = tmp_path_factory.mktemp("st_fe")
    grid = SimulationGrid(ser_values=[-5.0, 5.0, 15.0], snr_values=[], chunk_s=6.0, rir_decay_ms=60.0, seed=2,
                          sample_rate=FS)
    sim.build_testset(None, grid, str(out_dir))
    return os.path.join(str(out_dir), sim.MANIFEST_NAME)


def test_linear_pipeline_cancels_far_end_echo(far_end_testset, tmp_path):
    result = pipeline.cmd_eval(far_end_testset, _dsp_config(erle_warmup_s=2.0), str(tmp_path / "r.csv"))
    assert result["status"] == "success"
    results = result["results"]
    assert len(results) == 3 and set(results["status"]) == {"success"}
    assert all(value >= 30.0 for value in results["erle_db"])
    assert os.path.isfile(tmp_path / "r.csv")
    assert result["conditions"]


def test_identity_pipeline_has_no_erle(far_end_testset, tmp_path):
    result = pipeline.cmd_eval(far_end_testset, _dsp_config(filter="none"), str(tmp_path / "r.csv"))
    for value in result["results"]["erle_db"]:
        assert abs(value) < 0.1


def test_parallel_evaluation_matches_sequential(far_end_testset, tmp_path):
    config = _dsp_config(filter="none")
    sequential = pipeline.cmd_eval(far_end_testset, config, str(tmp_path / "a.csv"))["results"]
    parallel = pipeline.cmd_eval(far_end_testset, config.model_copy(update={"workers": 2}),
                                 str(tmp_path / "b.csv"))["results"]
    assert list(parallel["item"]) == list(sequential["item"])
    assert np.allclose(parallel["erle_db"].astype(float), sequential["erle_db"].astype(float))


def test_eval_missing_manifest(tmp_path):
    result = pipeline.cmd_eval(str(tmp_path / "none.tsv"), _dsp_config())
    assert result["exit_code"] == pipeline.EXIT_IO


def test_eval_reports_per_entry_failures(tmp_path):
    grid = SimulationGrid(ser_values=[5.0], snr_values=[math.inf], chunk_s=2.0, sample_rate=FS)
    sim.build_testset(None, grid, str(tmp_path))
    manifest = os.path.join(str(tmp_path), sim.MANIFEST_NAME)
    os.remove(os.path.join(str(tmp_path), "dt_snrinf_ser5", "utt000_mic.wav"))
    result = pipeline.cmd_eval(manifest, _dsp_config())
    assert result["status"] == "success"
    assert list(result["results"]["status"]) == ["error", "success"]
    assert os.path.isfile(os.path.join(str(tmp_path), pipeline.RESULTS_NAME))


# --- Default full-band path ---
@pytest.fixture(scope="module")
def fullband_testset(tmp_path_factory):
    out_dir = tmp_path_factory.mktemp("st_fe_48k")
    grid = SimulationGrid(ser_values=[-5.0, 5.0, 15.0], snr_values=[], chunk_s=6.0, rir_decay_ms=60.0,
                          echo_delay=960, seed=4)
    sim.build_testset(None, grid, str(out_dir))
    return os.path.join(str(out_dir), sim.MANIFEST_NAME)


def test_default_subband_pipeline_cancels_far_end_echo(fullband_testset, tmp_path):
    config = PipelineConfig(erle_warmup_s=2.0, workers=1)
    assert config.subband and config.tde and config.filter == "wrls" and config.combo is None
    result = pipeline.cmd_eval(fullband_testset, config, str(tmp_path / "r.csv"))
    assert result["status"] == "success"
    results = result["results"]
    assert set(results["status"]) == {"success"}
    assert list(results["delay"]) == [320, 320, 320]
    assert all(value >= 30.0 for value in results["erle_db"])


def test_dsp_path_runs_faster_than_half_real_time():
    gen = np.random.default_rng(9)
    n = 4 * 48000
    x = 0.1 * gen.standard_normal(n)
    d = 0.5 * delay_buffer(x, 960)
    config = PipelineConfig(combo=None, model_path=None, workers=1)
    _, report = pipeline.process_signals(AudioBuffer(d, 48000), AudioBuffer(x, 48000), config)
    assert {"split", "tde", "linear_aec", "synthesis"} <= set(report.stages)
    assert report.total_rtf < 0.5
