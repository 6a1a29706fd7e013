# backend/services/aec_service.py
import importlib.util
import logging
import os
from typing import Any, Dict, Optional

import numpy as np

from backend.config import settings
from backend.exceptions import ConfigurationError
from backend.models import AecFrameOut, RealArray, Spectrogram
from backend.schemas.signal_schemas import StftConfig
from backend.services.signal_service import DEFAULT_STFT

logger = logging.getLogger(__name__)

# Filter name -> module file under the adaptive filters directory
FILTER_MODULES = {
    "mdf": "mdf_filter.py",
    "wrls": "wrls_filter.py",
}

_CLASS_CACHE: Dict[str, type] = {}


def load_filter_class(name: str):
    """Dynamically loads a linear echo canceller class by its registered name."""
    key = name.lower()
    if key in _CLASS_CACHE:
        return _CLASS_CACHE[key]
    if key not in FILTER_MODULES:
        raise ConfigurationError(f"Unknown adaptive filter '{name}'. Available: {sorted(FILTER_MODULES)}.")
    if not settings.ADAPTIVE_FILTERS_DIR:
        raise ConfigurationError("ADAPTIVE_FILTERS_DIR is not configured.")

    file_path = os.path.join(settings.ADAPTIVE_FILTERS_DIR, FILTER_MODULES[key])
    if not os.path.isfile(file_path):
        logger.error(f"Adaptive filter file not found at {file_path} for '{key}'.")
        raise ConfigurationError(f"Adaptive filter module missing: {file_path}")

    base_module_name = os.path.splitext(FILTER_MODULES[key])[0]
    # mdf_filter.py -> MdfFilter
    assumed_class_name = "".join(word.capitalize() for word in base_module_name.split('_'))
    spec = importlib.util.spec_from_file_location(f"adaptive_filters.{base_module_name}", file_path)
    if spec is None or spec.loader is None:
        raise ConfigurationError(f"Could not load spec or loader for {file_path}.")
    module = importlib.util.module_from_spec(spec)
    try:
        spec.loader.exec_module(module)
    except Exception as e:
        logger.error(f"Error loading adaptive filter module {file_path}: {e}", exc_info=True)
        raise ConfigurationError(f"Could not import adaptive filter '{key}': {e}") from e

    loaded_class = getattr(module, assumed_class_name, None)
    if loaded_class is None:
        raise ConfigurationError(f"Could not find class {assumed_class_name} in {file_path}.")
    logger.info(f"Successfully loaded adaptive filter class '{loaded_class.__name__}' from {file_path}.")
    _CLASS_CACHE[key] = loaded_class
    return loaded_class


def get_filter_details(name: str) -> Dict[str, Any]:
    try:
        filter_class = load_filter_class(name)
        return {"status": "success", "name": name, "class": filter_class.__name__,
                "parameters_definition": filter_class.get_parameters_definition()}
    except ConfigurationError as e:
        logger.error(f"Error getting parameter definition for filter '{name}': {e}", exc_info=True)
        return {"status": "error", "message": str(e)}


# Short operation-level names accepted for the filter constructor keywords
PARAMETER_ALIASES = {
    "wrls": {"L": "taps", "lam": "forgetting"},
}


def resolve_parameters(name: str, params: Optional[Dict[str, Any]]) -> Dict[str, Any]:
    """Maps aliases onto constructor keywords and rejects keys the filter does not define."""
    key = name.lower()
    definition = load_filter_class(key).get_parameters_definition()
    aliases = PARAMETER_ALIASES.get(key, {})
    resolved: Dict[str, Any] = {}
    for param, value in (params or {}).items():
        target = aliases.get(param, param)
        if target not in definition:
            raise ConfigurationError(f"Unknown parameter '{param}' for filter '{key}'. "
                                     f"Known: {sorted(definition)}.")
        if target in resolved:
            raise ConfigurationError(f"Parameter '{target}' for filter '{key}' given twice.")
        resolved[target] = value
    return resolved


def create_filter(name: str, **params):
    return load_filter_class(name)(**resolve_parameters(name, params))


# --- Module-level operations ---
def mdf_create(tail_ms: float = 300.0, block_samples: int = 320, mu: float = 0.5, delta: float = 1e-6,
               sample_rate: int = 16000):
    return create_filter("mdf", tail_ms=tail_ms, block_samples=block_samples, mu=mu, delta=delta,
                         sample_rate=sample_rate)


def mdf_process(state, x_frame: RealArray, d_frame: RealArray) -> AecFrameOut:
    return state.process(x_frame, d_frame)


def wrls_create(L: int = 10, lam: float = 0.999, delta_init: float = 1e-3, crossband: int = 1):
    return create_filter("wrls", taps=L, forgetting=lam, delta_init=delta_init, crossband=crossband)


def wrls_process(state, X_frame, D_frame):
    return state.process_spectra(X_frame, D_frame)


def run_filter(name: str, x: RealArray, d: RealArray, params: Optional[Dict[str, Any]] = None,
               return_state: bool = False):
    """
    Whole-signal linear AEC. Returns (e, y), plus the filter state when return_state is set.
    With name 'none' the microphone passes through: e = d, y = 0.
    """
    x = np.asarray(x, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)
    if name == "none":
        result = (d.copy(), np.zeros_like(d))
        return (*result, None) if return_state else result
    state = create_filter(name, **(params or {}))
    e, y = state.process_signal(x, d)
    logger.info(f"[AEC] {state.name}: {state.frames_processed} frames, {state.frames_adapted} adapted, "
                f"tap norm {state.tap_norm():.3f}.")
    return (e, y, state) if return_state else (e, y)


def run_mdf(x: RealArray, d: RealArray, **params):
    """Whole-signal MDF: returns (e, y, state)."""
    return run_filter("mdf", x, d, params=params, return_state=True)


def run_wrls(x: RealArray, d: RealArray, stft_config: StftConfig = DEFAULT_STFT, **params):
    """
    Whole-signal wRLS: returns (e, y, E, Y, state). E and Y are Spectrograms on the frames
    of stft(d, stft_config), so a post-filter can read them without re-analysis.
    """
    params.setdefault("n_bins", stft_config.n_bins)
    state = create_filter("wrls", **params)
    e, y, E, Y = state.process_signal(np.asarray(x, dtype=np.float64), np.asarray(d, dtype=np.float64),
                                      return_spectra=True, stft_config=stft_config)
    logger.info(f"[AEC] {state.name}: {state.frames_processed} frames, {state.frames_adapted} adapted, "
                f"tap norm {state.tap_norm():.3f}.")
    if state.reinit_events:
        logger.warning(f"[AEC] {state.name}: {state.reinit_events} inverse-correlation re-initialisation(s).")
    E = Spectrogram(data=E, hop=stft_config.hop, fft_size=stft_config.fft_size)
    Y = Spectrogram(data=Y, hop=stft_config.hop, fft_size=stft_config.fft_size)
    return e, y, E, Y, state
