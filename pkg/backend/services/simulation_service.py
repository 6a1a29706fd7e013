# backend/services/simulation_service.py
import logging
import math
import os
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import signal as sp_signal
from scipy import stats
from tqdm import tqdm

from backend.exceptions import ConfigurationError, ShapeError
from backend.models import AudioBuffer, MixtureRecord, RealArray
from backend.schemas.simulation_schemas import ManifestEntry, MixSpec, SimulationGrid
from backend.services.metrics_service import active_mask, measure_levels
from backend.services.signal_service import fit_length, read_wav, write_wav

logger = logging.getLogger(__name__)

# --- Configuration ---
CLIP_LEVEL = 0.8
# Tail amplitude reaches -60 dB at the decay time
DECAY_DB = 60.0
# Reverberant tail energy relative to the unit direct path
TAIL_ENERGY = 0.5
SCHROEDER_FIT_DB = (-5.0, -25.0)
SOURCE_PEAK = 0.5
MANIFEST_NAME = "manifest.tsv"
HEADROOM = 0.99

SourcePair = Tuple[str, str]


# --- Echo paths ---
def synth_rir(decay_ms: float, length: Optional[int] = None, seed: int = 0, sample_rate: int = 16000,
              delay: int = 0) -> RealArray:
    """
    Unit direct path followed by an exponentially decaying white-noise tail, energy-normalised.
    decay_ms = 0 gives a pure (optionally delayed) impulse. length covers the tail, not the delay.
    """
    if decay_ms < 0 or delay < 0:
        raise ConfigurationError(f"RIR decay and delay must be nonnegative, got {decay_ms} ms / {delay}.")
    decay_samples = int(round(decay_ms * sample_rate / 1000.0))
    if length is None:
        length = max(1, decay_samples)
    if length < 1:
        raise ConfigurationError(f"RIR length must be positive, got {length}.")
    taps = np.zeros(length)
    taps[0] = 1.0
    if decay_samples > 0 and length > 1:
        rng = np.random.default_rng(seed)
        n = np.arange(1, length)
        envelope = np.exp(-math.log(10.0 ** (DECAY_DB / 20.0)) * n / decay_samples)
        tail = rng.standard_normal(length - 1) * envelope
        tail *= math.sqrt(TAIL_ENERGY / max(np.sum(tail ** 2), 1e-30))
        taps[1:] = tail
    taps /= np.sqrt(np.sum(taps ** 2))
    if delay:
        taps = np.concatenate([np.zeros(delay), taps])
    return taps


def estimate_t60(rir: RealArray, sample_rate: int = 16000) -> float:
    """Schroeder backward integration; the -5..-25 dB slope extrapolated to -60 dB, in seconds."""
    rir = np.asarray(rir, dtype=np.float64)
    energy = np.cumsum(rir[::-1] ** 2)[::-1]
    if energy[0] <= 0:
        return 0.0
    with np.errstate(divide="ignore"):
        edc_db = 10.0 * np.log10(energy / energy[0])
    hi, lo = SCHROEDER_FIT_DB
    idx = np.flatnonzero((edc_db <= hi) & (edc_db >= lo))
    if idx.size < 2:
        return 0.0
    fit = stats.linregress(idx / sample_rate, edc_db[idx])
    if fit.slope >= 0:
        return 0.0
    return float(-DECAY_DB / fit.slope)


def render_echo(x: AudioBuffer, rir: RealArray, nonlinear: bool = False, clip_level: float = CLIP_LEVEL) -> AudioBuffer:
    """z = (optionally hard-clipped x) * rir, cropped to len(x)."""
    src = np.clip(x.samples, -clip_level, clip_level) if nonlinear else x.samples
    z = sp_signal.fftconvolve(src, np.asarray(rir, dtype=np.float64))[:len(x)]
    return x.with_samples(z)


# --- Sources ---
def synthetic_speech(duration_s: float, sample_rate: int = 16000, seed: int = 0) -> AudioBuffer:
    """
    Speech-like test source: band-limited noise bursts with a syllabic (about 4 Hz) envelope,
    separated by pauses. Peak level 0.5.
    """
    rng = np.random.default_rng(seed)
    n = int(round(duration_s * sample_rate))
    if n <= 0:
        raise ConfigurationError(f"Source duration must be positive, got {duration_s} s.")
    b, a = sp_signal.butter(4, [100.0, min(4000.0, 0.45 * sample_rate)], btype="bandpass", fs=sample_rate)
    carrier = sp_signal.lfilter(b, a, rng.standard_normal(n))
    gate = np.zeros(n)
    pos = int(rng.uniform(0.05, 0.3) * sample_rate)
    while pos < n:
        burst = int(rng.uniform(0.4, 1.5) * sample_rate)
        t = np.arange(min(burst, n - pos)) / sample_rate
        rate_hz = rng.uniform(3.0, 5.0)
        gate[pos:pos + t.size] = np.abs(np.sin(np.pi * rate_hz * t)) ** 0.5 * rng.uniform(0.5, 1.0)
        pos += burst + int(rng.uniform(0.2, 0.7) * sample_rate)
    samples = carrier * gate
    peak = np.max(np.abs(samples))
    if peak > 0:
        samples *= SOURCE_PEAK / peak
    return AudioBuffer(samples=samples, sample_rate=sample_rate)


# --- Leveling ---
def _scale_for(target_db: float, ref_power: float, comp_power: float, what: str) -> float:
    if ref_power <= 0:
        raise ConfigurationError(f"Near-end speech is silent; cannot level {what} to {target_db} dB.")
    if comp_power <= 0:
        raise ConfigurationError(f"The {what} component is silent; cannot level it to {target_db} dB.")
    return math.sqrt(ref_power / (10.0 ** (target_db / 10.0)) / comp_power)


def mix(s: AudioBuffer, z: AudioBuffer, v: AudioBuffer, spec: MixSpec, x: Optional[AudioBuffer] = None) -> MixtureRecord:
    """
    Scales z so that SER (over near-end active blocks) and v so that SNR (over the whole chunk)
    hit the spec, zeroing components at +inf, and sums d = s + z + v. Far-end single-talk levels
    the echo against s first and then removes s and v.
    """
    rates = {s.sample_rate, z.sample_rate, v.sample_rate}
    if len(rates) != 1:
        raise ShapeError(f"Mixture components have different sample rates: {sorted(rates)}.")
    if not (len(s) == len(z) == len(v)):
        raise ShapeError(f"Mixture components differ in length: {len(s)}, {len(z)}, {len(v)}.")

    mask = active_mask(s)
    s_active_power = float(np.mean(s.samples[mask] ** 2)) if np.any(mask) else 0.0
    s_power = float(np.mean(s.samples ** 2)) if len(s) else 0.0

    if spec.ser_db == math.inf:
        z_out = np.zeros(len(z))
    else:
        z_active_power = float(np.mean(z.samples[mask] ** 2)) if np.any(mask) else 0.0
        z_out = z.samples * _scale_for(spec.ser_db, s_active_power, z_active_power, "echo")
    if spec.snr_db == math.inf:
        v_out = np.zeros(len(v))
    else:
        v_out = v.samples * _scale_for(spec.snr_db, s_power, float(np.mean(v.samples ** 2)), "noise")

    s_out = s.samples.copy()
    if spec.scenario == "st_fe":
        s_out = np.zeros(len(s))
        v_out = np.zeros(len(v))

    record = MixtureRecord(
        d=s.with_samples(s_out + z_out + v_out), s=s.with_samples(s_out), z=z.with_samples(z_out),
        v=v.with_samples(v_out), x=x if x is not None else z.with_samples(np.zeros(len(z))), spec=spec,
        realized_ser_db=math.inf, realized_snr_db=math.inf,
        near_end_active_power=s_active_power, near_end_power=s_power, active_mask=mask)
    levels = measure_levels(record)
    record.realized_ser_db, record.realized_snr_db = levels.ser_db, levels.snr_db
    logger.debug(f"[Simulation] {spec.condition}: realized SER {levels.ser_db:.2f} dB, SNR {levels.snr_db:.2f} dB.")
    return record


def simulate_mixture(near: AudioBuffer, far: AudioBuffer, spec: MixSpec,
                     noise: Optional[AudioBuffer] = None) -> MixtureRecord:
    """Echo path from spec (seeded RIR, bulk delay, optional clipping), white noise unless given, then mix."""
    if near.sample_rate != far.sample_rate or len(near) != len(far):
        raise ShapeError(f"Near-end ({len(near)} @ {near.sample_rate}) and far-end ({len(far)} @ {far.sample_rate}) must match.")
    rng = np.random.default_rng(spec.seed)
    rir = synth_rir(spec.rir_decay_ms, seed=int(rng.integers(2 ** 31)), sample_rate=far.sample_rate,
                    delay=spec.echo_delay)
    z = render_echo(far, rir, spec.nonlinear)
    if noise is None:
        noise = near.with_samples(rng.standard_normal(len(near)))
    return mix(near, z, noise, spec, x=far)


# --- Condition grid ---
def condition_grid(grid: SimulationGrid = SimulationGrid()) -> List[MixSpec]:
    """
    Double-talk for every finite SER × SNR, near-end single-talk (SER = +inf) per SNR, and
    far-end single-talk per finite SER. The default grid gives 6 + 2 + 3 = 11 conditions.
    """
    common = dict(nonlinear=grid.nonlinear, echo_delay=grid.echo_delay, rir_decay_ms=grid.rir_decay_ms)
    finite_ser = [ser for ser in grid.ser_values if ser != math.inf]
    specs = []
    for snr in grid.snr_values:
        for ser in finite_ser:
            specs.append(MixSpec(ser_db=ser, snr_db=snr, scenario="dt", **common))
    if math.inf in grid.ser_values:
        for snr in grid.snr_values:
            specs.append(MixSpec(ser_db=math.inf, snr_db=snr, scenario="st_ne", **common))
    if grid.include_far_end_single_talk:
        for ser in finite_ser:
            specs.append(MixSpec(ser_db=ser, snr_db=math.inf, scenario="st_fe", **common))
    return specs


def _item_seed(base: int, item: int, condition: int) -> int:
    return int(np.random.SeedSequence([base, item, condition]).generate_state(1)[0])


def _load_sources(sources: Optional[Sequence[SourcePair]], grid: SimulationGrid) -> List[Tuple[str, AudioBuffer, AudioBuffer]]:
    n = int(round(grid.chunk_s * grid.sample_rate))
    loaded = []
    if sources:
        for near_path, far_path in sources:
            near, far = read_wav(near_path), read_wav(far_path)
            for path, buf in ((near_path, near), (far_path, far)):
                if buf.sample_rate != grid.sample_rate:
                    raise ConfigurationError(f"{path} is at {buf.sample_rate} Hz; the grid needs {grid.sample_rate} Hz.")
            name = os.path.splitext(os.path.basename(near_path))[0]
            loaded.append((name, near.with_samples(fit_length(near.samples, n)),
                           far.with_samples(fit_length(far.samples, n))))
    else:
        for u in range(grid.utterances):
            near = synthetic_speech(grid.chunk_s, grid.sample_rate, seed=_item_seed(grid.seed, u, -1))
            far = synthetic_speech(grid.chunk_s, grid.sample_rate, seed=_item_seed(grid.seed, u, -2))
            loaded.append((f"utt{u:03d}", near, far))
    return loaded


def build_testset(sources: Optional[Sequence[SourcePair]], grid: SimulationGrid, out_dir: str) -> pd.DataFrame:
    """
    Renders every (utterance, condition) pair into out_dir/<condition>/ and writes a tab-separated
    manifest with component paths (relative to out_dir) and realized levels.
    Without sources, grid.utterances synthetic utterance pairs are generated.
    """
    specs = condition_grid(grid)
    items = _load_sources(sources, grid) if specs else []
    os.makedirs(out_dir, exist_ok=True)
    rows = []
    jobs = [(u, item, c, spec) for u, item in enumerate(items) for c, spec in enumerate(specs)]
    for u, (name, near, far), c, spec in tqdm(jobs, desc="Simulating", unit="mix", disable=not jobs):
        seed = _item_seed(grid.seed, u, c)
        spec = spec.model_copy(update={"seed": seed})
        record, gain = _fit_headroom(simulate_mixture(near, far, spec))
        cond_dir = os.path.join(out_dir, spec.condition)
        os.makedirs(cond_dir, exist_ok=True)
        paths = {}
        for role, buf in (("mic", record.d), ("ref", record.x), ("near_end", record.s),
                          ("echo", record.z), ("noise", record.v)):
            rel = os.path.join(spec.condition, f"{name}_{role}.wav")
            write_wav(os.path.join(out_dir, rel), buf)
            paths[f"{role}_path"] = rel
        entry = ManifestEntry(
            item=name, condition=spec.condition, scenario=spec.scenario, ser_db=spec.ser_db, snr_db=spec.snr_db,
            realized_ser_db=record.realized_ser_db, realized_snr_db=record.realized_snr_db,
            nonlinear=spec.nonlinear, echo_delay=spec.echo_delay, seed=seed, sample_rate=grid.sample_rate,
            near_end_active_power=record.near_end_active_power, near_end_power=record.near_end_power,
            note=f"scaled by {gain:.4f} for headroom" if gain < 1.0 else None, **paths)
        rows.append(entry.model_dump())

    manifest = pd.DataFrame(rows, columns=list(ManifestEntry.model_fields))
    manifest_path = os.path.join(out_dir, MANIFEST_NAME)
    manifest.to_csv(manifest_path, sep="\t", index=False)
    logger.info(f"[Simulation] Wrote {len(manifest)} mixtures over {len(specs)} conditions to {manifest_path}.")
    return manifest


def _fit_headroom(record: MixtureRecord) -> Tuple[MixtureRecord, float]:
    """Scales d and its components together so d peaks at HEADROOM at most; x is left as is."""
    peak = float(np.max(np.abs(record.d.samples), initial=0.0))
    if peak <= HEADROOM:
        return record, 1.0
    gain = HEADROOM / peak
    for role in ("s", "z", "v"):
        buf = getattr(record, role)
        setattr(record, role, buf.with_samples(buf.samples * gain))
    # d rebuilt from the scaled parts keeps d == s + z + v exact
    record.d = record.d.with_samples(record.s.samples + record.z.samples + record.v.samples)
    record.near_end_active_power *= gain ** 2
    record.near_end_power *= gain ** 2
    return record, gain


def read_manifest(path: str) -> pd.DataFrame:
    """Loads a manifest; component paths are resolved against the manifest's directory."""
    try:
        manifest = pd.read_csv(path, sep="\t", keep_default_na=True)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise ConfigurationError(f"Could not read manifest {path}: {e}") from e
    base = os.path.dirname(os.path.abspath(path))
    for column in ("mic_path", "ref_path", "near_end_path", "echo_path", "noise_path"):
        if column in manifest:
            manifest[column] = [p if os.path.isabs(str(p)) else os.path.join(base, str(p)) for p in manifest[column]]
    return manifest
