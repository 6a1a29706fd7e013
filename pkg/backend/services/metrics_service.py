# backend/services/metrics_service.py
import logging
import math
from typing import Iterable, Optional, Tuple

import numpy as np
import pandas as pd

from backend.config import settings
from backend.exceptions import ShapeError
from backend.models import AudioBuffer, MixtureRecord, RealArray
from backend.schemas.metrics_schemas import ErleResult, LevelMeasurement
from backend.schemas.objective_schemas import VadLabelConfig
from backend.services.signal_service import fit_length

logger = logging.getLogger(__name__)

# --- Configuration ---
TRACK_FRAME_S = 0.01
TRACK_SMOOTHING = 0.9
_POWER_FLOOR = 1e-20
LEVEL_BLOCK_S = 0.01

RESULT_COLUMNS = ["item", "condition", "scenario", "ser_db", "snr_db", "realized_ser_db", "realized_snr_db",
                  "erle_db", "erle_valid", "delay", "wb_pesq", "status", "message"]


def _check_pair(d: AudioBuffer, s_hat: AudioBuffer) -> None:
    if d.sample_rate != s_hat.sample_rate:
        raise ShapeError(f"ERLE inputs differ in sample rate: {d.sample_rate} vs {s_hat.sample_rate} Hz.")
    if len(d) != len(s_hat):
        raise ShapeError(f"ERLE inputs differ in length: {len(d)} vs {len(s_hat)} samples.")


def erle(d_full: AudioBuffer, s_hat_full: AudioBuffer) -> ErleResult:
    """10 log10(Σd² / Σŝ²) over the whole buffers; an all-zero ŝ gives +inf flagged invalid."""
    _check_pair(d_full, s_hat_full)
    num = float(np.sum(d_full.samples ** 2))
    den = float(np.sum(s_hat_full.samples ** 2))
    if den <= 0.0:
        return ErleResult(erle_db=math.inf, valid=False)
    if num <= 0.0:
        return ErleResult(erle_db=-math.inf, valid=False)
    return ErleResult(erle_db=10.0 * math.log10(num / den), valid=True)


# --- Levels ---
def active_mask(s: AudioBuffer, cfg: VadLabelConfig = VadLabelConfig()) -> np.ndarray:
    """Sample mask of 10 ms blocks where s is within the relative floor of its loudest block and above the absolute floor."""
    block = max(1, int(round(LEVEL_BLOCK_S * s.sample_rate)))
    n_blocks = -(-len(s) // block)
    padded = fit_length(s.samples, n_blocks * block).reshape(n_blocks, block)
    power = np.mean(padded ** 2, axis=1)
    if n_blocks == 0 or not np.any(power > 0):
        return np.zeros(len(s), dtype=bool)
    level = 10.0 * np.log10(np.maximum(power, _POWER_FLOOR))
    active = (level > np.max(level) - cfg.relative_floor_db) & (level > cfg.absolute_floor_dbfs)
    return np.repeat(active, block)[:len(s)]


def measure_levels(record: MixtureRecord) -> LevelMeasurement:
    """
    Realized SER (near-end active blocks, against the stored leveling reference) and SNR (whole chunk).
    Components that are all zero give +inf.
    """
    mask = record.active_mask
    if mask is None:
        mask = active_mask(record.s)
    z_active = float(np.mean(record.z.samples[mask] ** 2)) if np.any(mask) else 0.0
    v_power = float(np.mean(record.v.samples ** 2)) if len(record.v) else 0.0
    return LevelMeasurement(ser_db=_ratio_db(record.near_end_active_power, z_active),
                            snr_db=_ratio_db(record.near_end_power, v_power))


def _ratio_db(num: float, den: float) -> float:
    if den <= 0.0:
        return math.inf
    if num <= 0.0:
        return -math.inf
    return 10.0 * math.log10(num / den)


def erle_track(d: AudioBuffer, e: AudioBuffer, frame_s: float = TRACK_FRAME_S,
               smoothing: float = TRACK_SMOOTHING) -> RealArray:
    """Per-frame ERLE (dB) from recursively smoothed frame powers of d and e."""
    _check_pair(d, e)
    frame = max(1, int(round(frame_s * d.sample_rate)))
    n_frames = len(d) // frame
    if n_frames == 0:
        return np.zeros(0)
    d_pow = np.mean(d.samples[:n_frames * frame].reshape(n_frames, frame) ** 2, axis=1)
    e_pow = np.mean(e.samples[:n_frames * frame].reshape(n_frames, frame) ** 2, axis=1)
    track = np.empty(n_frames)
    d_acc = e_acc = 0.0
    for i in range(n_frames):
        d_acc = smoothing * d_acc + (1.0 - smoothing) * d_pow[i]
        e_acc = smoothing * e_acc + (1.0 - smoothing) * e_pow[i]
        track[i] = 10.0 * np.log10(max(d_acc, _POWER_FLOOR) / max(e_acc, _POWER_FLOOR))
    return track


def frames_to_erle(track: RealArray, target_db: float) -> Optional[int]:
    """Index of the first frame from which the ERLE track stays at or above target_db; None if never."""
    below = np.flatnonzero(np.asarray(track) < target_db)
    if below.size == 0:
        return 0 if len(track) else None
    first = int(below[-1]) + 1
    return first if first < len(track) else None


def format_erle(value: float, cap: float = settings.ERLE_DISPLAY_CAP_DB) -> str:
    if math.isnan(value):
        return ""
    if value == math.inf or value > cap:
        return f">{cap:g}"
    if value == -math.inf:
        return "-inf"
    return f"{value:.2f}"


# --- Result tables ---
def results_frame(rows: Iterable[dict]) -> pd.DataFrame:
    frame = pd.DataFrame(list(rows))
    for column in RESULT_COLUMNS:
        if column not in frame:
            frame[column] = pd.Series(dtype="object")
    return frame[RESULT_COLUMNS]


def condition_table(results: pd.DataFrame) -> pd.DataFrame:
    """Mean ERLE per far-end single-talk condition, laid out SNR rows × SER columns."""
    st_fe = results[(results["scenario"] == "st_fe") & (results["status"] == "success")]
    if st_fe.empty:
        return pd.DataFrame()
    return st_fe.pivot_table(index="snr_db", columns="ser_db", values="erle_db", aggfunc="mean")


def render_results(results: pd.DataFrame, cap: float = settings.ERLE_DISPLAY_CAP_DB) -> Tuple[str, str]:
    """Aligned text tables: the per-entry listing and the condition pivot."""
    if results.empty:
        return "(no entries)", ""
    shown = results.copy()
    shown["erle_db"] = [format_erle(float(v), cap) if pd.notna(v) else "" for v in shown["erle_db"]]
    listing = shown.fillna("").to_string(index=False)
    pivot = condition_table(results)
    pivot_text = pivot.apply(lambda col: col.map(lambda v: format_erle(float(v), cap))).to_string() if not pivot.empty else ""
    return listing, pivot_text


def write_results(results: pd.DataFrame, csv_path: str) -> None:
    results.to_csv(csv_path, index=False)
    logger.info(f"[Metrics] Wrote {len(results)} result rows to {csv_path}.")
