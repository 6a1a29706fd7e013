# backend/services/pipeline_service.py
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor, as_completed
from functools import lru_cache
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from tqdm import tqdm

from backend.exceptions import AecError, AudioIOError, ConfigurationError, EmptyInputError, ModelLoadError
from backend.models import FULLBAND_RATE, WIDEBAND_RATE, AudioBuffer, Spectrogram
from backend.postfilter.network import GftnnModel, load_model, random_model
from backend.schemas.pipeline_schemas import PipelineConfig, RunReport, StageTiming
from backend.schemas.postfilter_schemas import ModelArch
from backend.schemas.simulation_schemas import SimulationGrid
from backend.services import aec_service, metrics_service, simulation_service, subband_service, tde_service
from backend.services.signal_service import delay_buffer, fit_length, istft, read_wav, stack_features, stft, write_wav

logger = logging.getLogger(__name__)

# --- Exit codes ---
EXIT_OK = 0
EXIT_USAGE = 1
EXIT_IO = 2
EXIT_MODEL = 3

RESULTS_NAME = "results.csv"


def exit_code_for(exc: Exception) -> int:
    if isinstance(exc, ModelLoadError):
        return EXIT_MODEL
    if isinstance(exc, ConfigurationError):
        return EXIT_USAGE
    return EXIT_IO


class _StageClock:
    """Wall time per named stage."""

    def __init__(self):
        self.seconds: Dict[str, float] = {}
        self._name: Optional[str] = None
        self._start = 0.0

    def start(self, name: str) -> None:
        self.stop()
        self._name = name
        self._start = time.perf_counter()

    def stop(self) -> None:
        if self._name is not None:
            self.seconds[self._name] = self.seconds.get(self._name, 0.0) + time.perf_counter() - self._start
            self._name = None


@lru_cache(maxsize=4)
def _cached_model(model_path: Optional[str], seed: Optional[int], arch: ModelArch) -> GftnnModel:
    if model_path:
        return load_model(model_path, arch)
    return random_model(seed, arch)


def build_model(config: PipelineConfig) -> Optional[GftnnModel]:
    if not config.uses_postfilter:
        return None
    arch = ModelArch.for_combo(config.combo, channels=config.model_channels, freq_bins=config.stft.n_bins)
    return _cached_model(config.model_path, config.random_model_seed, arch)


def latency_samples(config: PipelineConfig, sample_rate: int) -> int:
    """Output lag in samples at sample_rate: window + hop on the 16 kHz frame schedule, plus the bank delay."""
    frame_latency = config.stft.win_len + config.stft.hop
    if config.subband:
        fb = subband_service.design_filterbank(config.filterbank_taps)
        return frame_latency * (sample_rate // WIDEBAND_RATE) + fb.group_delay
    return frame_latency


def _filter_params(config: PipelineConfig) -> Dict[str, Any]:
    if config.filter == "mdf":
        return {**config.mdf.model_dump(), "sample_rate": WIDEBAND_RATE}
    if config.filter == "wrls":
        return config.wrls.model_dump()
    return {}


def _estimate_and_align(x: AudioBuffer, d: AudioBuffer, config: PipelineConfig,
                        report: RunReport) -> AudioBuffer:
    try:
        est = tde_service.estimate_delay(x, d, cfg=config.tde_config, mode=config.mode)
    except EmptyInputError as e:
        logger.warning(f"[Pipeline] TDE skipped: {e}")
        return x
    report.delay = est.delay
    report.delay_confidence = est.confidence
    if not est.reliable:
        logger.warning(f"[Pipeline] TDE confidence {est.confidence:.2f} below threshold; reference left unshifted.")
        return x
    report.alignment_applied = est.delay > 0
    return tde_service.align(x, est, length=len(d)) if est.delay > 0 else x


def process_signals(mic: AudioBuffer, ref: AudioBuffer, config: PipelineConfig) -> Tuple[AudioBuffer, RunReport]:
    """
    In-memory pipeline: split (48 kHz) -> TDE + alignment -> linear AEC -> post-filter ->
    high-band gain -> synthesis, emitted with the frame-synchronous latency.
    """
    expected_rate = FULLBAND_RATE if config.subband else WIDEBAND_RATE
    if mic.sample_rate != ref.sample_rate:
        raise AudioIOError(f"Microphone ({mic.sample_rate} Hz) and reference ({ref.sample_rate} Hz) rates differ.")
    if mic.sample_rate != expected_rate:
        raise AudioIOError(f"{'Subband' if config.subband else 'Wideband'} mode needs {expected_rate} Hz input, "
                           f"got {mic.sample_rate} Hz.")
    ref = ref.with_samples(fit_length(ref.samples, len(mic)))

    clock = _StageClock()
    report = RunReport(filter=config.filter, combo=config.combo, subband=config.subband, mode=config.mode,
                       sample_rate=mic.sample_rate, duration_s=mic.duration_s)

    # Model first so a bad weight file fails before any signal work
    clock.start("model_load")
    model = build_model(config)

    fb = None
    if config.subband:
        clock.start("split")
        fb = subband_service.design_filterbank(config.filterbank_taps)
        mic_sub = subband_service.split(mic, fb)
        ref_sub = subband_service.split(ref, fb)
        d, x = mic_sub.wide, ref_sub.wide
    else:
        mic_sub = None
        d, x = mic, ref

    if config.tde:
        clock.start("tde")
        x = _estimate_and_align(x, d, config, report)

    clock.start("linear_aec")
    E = Y = None
    if config.filter == "none":
        e, y = d.samples.copy(), np.zeros(len(d))
    elif config.filter == "wrls":
        e, y, E, Y, state = aec_service.run_wrls(x.samples, d.samples, stft_config=config.stft,
                                                  **_filter_params(config))
        report.wrls_reinitializations = state.reinit_events
    else:
        e, y = aec_service.run_filter(config.filter, x.samples, d.samples, _filter_params(config))

    clock.start("stft")
    D = stft(d, config.stft)
    # wRLS already works on these frames; time-domain filters are analysed here
    if E is None:
        E = stft(d.with_samples(e), config.stft)

    if model is not None:
        if Y is None:
            Y = stft(d.with_samples(y), config.stft)
        X = stft(x, config.stft)
        clock.start("postfilter")
        feat = stack_features(config.combo, D=D, E=E, X=X, Y=Y, compress_exponent=model.arch.compress_exponent)
        S_hat, _ = model.forward(feat)
        S_hat = Spectrogram(data=S_hat.data, hop=config.stft.hop, fft_size=config.stft.fft_size)
    else:
        S_hat = E

    clock.start("synthesis")
    frame_latency = config.stft.win_len + config.stft.hop
    if config.subband:
        g = subband_service.highband_gain(S_hat, D, config.gain_bands)
        out = subband_service.synthesize(S_hat, mic_sub, g, fb, config.stft, latency=frame_latency)
    else:
        out = istft(S_hat, config.stft, length=len(mic))
        out = out.with_samples(delay_buffer(out.samples, frame_latency))
    clock.stop()

    report.latency_samples = latency_samples(config, mic.sample_rate)
    duration = max(mic.duration_s, 1e-12)
    report.stages = {name: StageTiming(seconds=sec, rtf=sec / duration) for name, sec in clock.seconds.items()}
    report.total_rtf = sum(clock.seconds.values()) / duration
    logger.info(f"[Pipeline] {config.filter}/{config.combo or 'DSP-only'} on {mic.duration_s:.2f} s: "
                f"delay={report.delay}, latency={report.latency_samples}, RTF={report.total_rtf:.3f}")
    return out, report


# --- Commands ---
def cmd_process(mic_path: str, ref_path: str, out_path: str, config: PipelineConfig) -> Dict[str, Any]:
    try:
        mic = read_wav(mic_path)
        ref = read_wav(ref_path)
        out, report = process_signals(mic, ref, config)
        write_wav(out_path, out)
        report.output_path = out_path
        return {"status": "success", "message": f"Wrote {out_path}.", "exit_code": EXIT_OK,
                "report": report.model_dump()}
    except AecError as e:
        logger.error(f"[Pipeline] process failed: {e}", exc_info=True)
        return {"status": "error", "message": str(e), "exit_code": exit_code_for(e)}


def _score_entry(entry: Dict[str, Any], config: PipelineConfig) -> Dict[str, Any]:
    row = {key: entry.get(key) for key in ("item", "condition", "scenario", "ser_db", "snr_db",
                                           "realized_ser_db", "realized_snr_db")}
    try:
        mic = read_wav(entry["mic_path"])
        ref = read_wav(entry["ref_path"])
        out, report = process_signals(mic, ref, config)
        lag = report.latency_samples
        warmup = int(round(config.erle_warmup_s * mic.sample_rate))
        n = len(mic) - lag
        if n - warmup <= 0:
            raise EmptyInputError(f"{entry['mic_path']} is too short to score after {lag} samples of latency "
                                  f"and {warmup} of warm-up.")
        row["delay"] = report.delay
        if entry.get("scenario") == "st_fe":
            d_seg = mic.with_samples(mic.samples[warmup:n])
            s_seg = out.with_samples(out.samples[lag + warmup:lag + n])
            result = metrics_service.erle(d_seg, s_seg)
            row["erle_db"] = result.erle_db
            row["erle_valid"] = result.valid
        row["status"] = "success"
    except AecError as e:
        logger.error(f"[Eval] {entry.get('item')} / {entry.get('condition')} failed: {e}", exc_info=True)
        row["status"] = "error"
        row["message"] = str(e)
    return row


def _score_entry_job(args: Tuple[int, Dict[str, Any], Dict[str, Any]]) -> Tuple[int, Dict[str, Any]]:
    index, entry, config_values = args
    return index, _score_entry(entry, PipelineConfig(**config_values))


def evaluate_manifest(manifest: pd.DataFrame, config: PipelineConfig) -> pd.DataFrame:
    entries = [{k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in rec.items()}
               for rec in manifest.to_dict(orient="records")]
    rows: List[Optional[Dict[str, Any]]] = [None] * len(entries)
    if config.workers > 1 and len(entries) > 1:
        config_values = config.model_dump()
        with ProcessPoolExecutor(max_workers=config.workers) as executor:
            futures = [executor.submit(_score_entry_job, (i, entry, config_values)) for i, entry in enumerate(entries)]
            for future in tqdm(as_completed(futures), total=len(futures), desc="Evaluating", unit="entry"):
                index, row = future.result()
                rows[index] = row
    else:
        for i, entry in enumerate(tqdm(entries, desc="Evaluating", unit="entry", disable=not entries)):
            rows[i] = _score_entry(entry, config)
    return metrics_service.results_frame(rows)


def cmd_eval(manifest_path: str, config: PipelineConfig, out_csv: Optional[str] = None) -> Dict[str, Any]:
    if not os.path.isfile(manifest_path):
        return {"status": "error", "message": f"Manifest not found: {manifest_path}", "exit_code": EXIT_IO}
    try:
        manifest = simulation_service.read_manifest(manifest_path)
        results = evaluate_manifest(manifest, config)
    except AecError as e:
        logger.error(f"[Eval] Evaluation of {manifest_path} failed: {e}", exc_info=True)
        return {"status": "error", "message": str(e), "exit_code": exit_code_for(e)}

    out_csv = out_csv or os.path.join(os.path.dirname(os.path.abspath(manifest_path)), RESULTS_NAME)
    try:
        metrics_service.write_results(results, out_csv)
    except OSError as e:
        logger.error(f"[Eval] Could not write {out_csv}: {e}", exc_info=True)
        return {"status": "error", "message": f"Could not write results to {out_csv}: {e}", "exit_code": EXIT_IO}
    listing, pivot = metrics_service.render_results(results)
    failed = int((results["status"] == "error").sum()) if not results.empty else 0
    outcome = {"results": results, "table": listing, "conditions": pivot, "results_path": out_csv}
    if failed and failed == len(results):
        first = results.loc[results["status"] == "error", "message"].iloc[0]
        logger.error(f"[Eval] All {failed} entries of {manifest_path} failed.")
        return {"status": "error", "message": f"All {failed} entries failed (first: {first}); results in {out_csv}.",
                "exit_code": EXIT_IO, **outcome}
    return {"status": "success", "message": f"Scored {len(results)} entries ({failed} failed); results in {out_csv}.",
            "exit_code": EXIT_OK, **outcome}


def cmd_simulate(grid: SimulationGrid, out_dir: str, sources: Optional[Sequence[Tuple[str, str]]] = None) -> Dict[str, Any]:
    try:
        manifest = simulation_service.build_testset(sources, grid, out_dir)
    except AecError as e:
        logger.error(f"[Simulation] Building the test set in {out_dir} failed: {e}", exc_info=True)
        return {"status": "error", "message": str(e), "exit_code": exit_code_for(e)}
    except OSError as e:
        logger.error(f"[Simulation] Could not write to {out_dir}: {e}", exc_info=True)
        return {"status": "error", "message": f"Could not write to {out_dir}: {e}", "exit_code": EXIT_IO}
    manifest_path = os.path.join(out_dir, simulation_service.MANIFEST_NAME)
    return {"status": "success", "message": f"Wrote {len(manifest)} mixtures; manifest at {manifest_path}.",
            "exit_code": EXIT_OK, "manifest": manifest, "manifest_path": manifest_path}
