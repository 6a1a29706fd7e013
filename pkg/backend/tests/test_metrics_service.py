# backend/tests/test_metrics_service.py
import math

import numpy as np
import pandas as pd
import pytest

from backend.exceptions import ShapeError
from backend.models import AudioBuffer
from backend.services import metrics_service as metrics

FS = 16000


def _buf(samples) -> AudioBuffer:
    return AudioBuffer(np.asarray(samples, dtype=float), FS)


def test_erle_reference_values(rng):
    d = rng.standard_normal(1000)
    assert metrics.erle(_buf(d), _buf(d)).erle_db == pytest.approx(0.0, abs=1e-12)
    assert metrics.erle(_buf(d), _buf(0.1 * d)).erle_db == pytest.approx(20.0)
    silent = metrics.erle(_buf(d), _buf(np.zeros(1000)))
    assert silent.erle_db == math.inf and not silent.valid


def test_erle_is_scale_invariant(rng):
    d = rng.standard_normal(500)
    s_hat = rng.standard_normal(500)
    base = metrics.erle(_buf(d), _buf(s_hat)).erle_db
    assert metrics.erle(_buf(3.0 * d), _buf(3.0 * s_hat)).erle_db == pytest.approx(base)


def test_erle_rejects_mismatched_buffers():
    with pytest.raises(ShapeError):
        metrics.erle(_buf(np.ones(10)), _buf(np.ones(11)))
    with pytest.raises(ShapeError):
        metrics.erle(_buf(np.ones(10)), AudioBuffer(np.ones(10), 48000))


def test_erle_track_and_time_to_target(rng):
    d = rng.standard_normal(FS)
    # Residual drops from 0 dB to -30 dB after a quarter of a second
    e = np.concatenate([d[:FS // 4], 10 ** (-30 / 20) * d[FS // 4:]])
    track = metrics.erle_track(_buf(d), _buf(e))
    assert len(track) == 100
    assert track[10] == pytest.approx(0.0, abs=1e-9)
    assert track[-1] > 25.0
    first = metrics.frames_to_erle(track, 20.0)
    assert 50 < first < 100
    assert metrics.frames_to_erle(track, 60.0) is None
    assert metrics.frames_to_erle(np.full(5, 40.0), 20.0) == 0


def test_format_erle_caps_infinity():
    assert metrics.format_erle(math.inf, cap=200.0) == ">200"
    assert metrics.format_erle(12.346) == "12.35"
    assert metrics.format_erle(float("nan")) == ""


def test_condition_table_and_rendering():
    rows = [
        {"item": "a", "condition": "st_fe_snrinf_ser5", "scenario": "st_fe", "ser_db": 5.0, "snr_db": math.inf,
         "erle_db": 40.0, "status": "success"},
        {"item": "b", "condition": "st_fe_snrinf_ser5", "scenario": "st_fe", "ser_db": 5.0, "snr_db": math.inf,
         "erle_db": 50.0, "status": "success"},
        {"item": "a", "condition": "st_fe_snrinf_ser-5", "scenario": "st_fe", "ser_db": -5.0, "snr_db": math.inf,
         "erle_db": math.inf, "status": "success"},
        {"item": "a", "condition": "dt_snr5_ser5", "scenario": "dt", "ser_db": 5.0, "snr_db": 5.0,
         "erle_db": None, "status": "success"},
    ]
    results = metrics.results_frame(rows)
    assert list(results.columns) == metrics.RESULT_COLUMNS
    pivot = metrics.condition_table(results)
    assert pivot.loc[math.inf, 5.0] == pytest.approx(45.0)
    listing, pivot_text = metrics.render_results(results)
    assert ">200" in listing and ">200" in pivot_text
    assert metrics.render_results(metrics.results_frame([])) == ("(no entries)", "")


def test_write_results(tmp_path):
    results = metrics.results_frame([{"item": "a", "status": "error", "message": "boom"}])
    path = tmp_path / "results.csv"
    metrics.write_results(results, str(path))
    back = pd.read_csv(path)
    assert list(back.columns) == metrics.RESULT_COLUMNS
    assert back.loc[0, "message"] == "boom"
