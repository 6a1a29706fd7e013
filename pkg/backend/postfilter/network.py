# backend/postfilter/network.py
import logging
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy.special import softmax

from backend.exceptions import ConfigurationError, ShapeError
from backend.models import FeatureTensor, Spectrogram, VadLogits
from backend.postfilter import layers
from backend.postfilter.weights import WeightContainer, init_random, param_count, read_weights, validate
from backend.schemas.postfilter_schemas import ModelArch
from backend.services.signal_service import decompress_spectrum

logger = logging.getLogger(__name__)


class GftnnModel:
    """
    Gated convolutional encoder, FTLSTM bottleneck and two gated transposed-convolution decoders
    estimating the real and imaginary parts of the compressed near-end spectrum, plus a frame-wise
    VAD head on the bottleneck. Weights are read-only after construction.
    """

    def __init__(self, container: WeightContainer, arch: ModelArch):
        validate(container, arch)
        self.arch = arch
        self.container = container
        self._w: Dict[str, np.ndarray] = {}
        for name, value in container.tensors.items():
            w = value.astype(np.float64)
            w.setflags(write=False)
            self._w[name] = w
        self.freqs = arch.encoder_freqs()
        if arch.encoder_layers and (min(self.freqs[:-1]) < 3 or self.freqs[-1] < 1):
            raise ConfigurationError(f"{arch.encoder_layers} encoder layers leave no frequency bins from {arch.freq_bins}.")
        self.output_padding = self._decoder_output_padding()
        self.name = f"GFTNN (C={arch.channels}, C_in={arch.input_channels})"
        logger.info(f"[{self.name}] Ready: {param_count(container)} parameters, frequency chain {self.freqs}.")

    def _decoder_output_padding(self) -> List[int]:
        pads = []
        mirrored = self.freqs[::-1]
        for i in range(self.arch.encoder_layers):
            pad = mirrored[i + 1] - (2 * mirrored[i] + 1)
            if pad not in (0, 1):
                raise ConfigurationError(f"Decoder cannot map {mirrored[i]} to {mirrored[i + 1]} bins.")
            pads.append(pad)
        return pads

    def _sub(self, prefix: str) -> Dict[str, np.ndarray]:
        return layers.sub_weights(self._w, prefix)

    def forward(self, feat: FeatureTensor, trace: Optional[Dict[str, tuple]] = None) -> Tuple[Spectrogram, VadLogits]:
        """
        feat: C_in×T×F stack of compressed spectra. Returns the decompressed estimate Ŝ (T×F)
        and the T×2 VAD logits. Pass a dict as trace to collect intermediate shapes.
        """
        arch = self.arch
        if arch.encoder_layers == 0:
            raise ConfigurationError(f"[{self.name}] A model without encoder layers cannot run forward.")
        x = np.asarray(feat.data, dtype=np.float64)
        if x.ndim != 3 or x.shape[0] != arch.input_channels or x.shape[2] != arch.freq_bins:
            raise ShapeError(f"[{self.name}] Expected features {arch.input_channels}×T×{arch.freq_bins}, got {x.shape}.")
        if x.shape[1] == 0:
            raise ShapeError(f"[{self.name}] Feature tensor has no frames.")

        skips = []
        h = x
        for i in range(arch.encoder_layers):
            h = layers.gconv_forward(h, self._sub(f"encoder.{i}."))
            skips.append(h)
            _record(trace, f"encoder.{i}", h)

        for j in range(arch.ftlstm_blocks):
            h = layers.ftlstm_forward(h, self._sub(f"ftlstm.{j}."))
            _record(trace, f"ftlstm.{j}", h)

        real = self._decode(h, skips, "real_decoder", trace)
        imag = self._decode(h, skips, "imag_decoder", trace)

        if arch.vad_head:
            logits = layers.vad_forward(h, self._sub("vad."), trace)
        else:
            logits = np.zeros((x.shape[1], 2))

        compressed = Spectrogram(data=real[0] + 1j * imag[0], fft_size=2 * (arch.freq_bins - 1))
        return decompress_spectrum(compressed, arch.compress_exponent), logits

    def _decode(self, h: np.ndarray, skips: List[np.ndarray], branch: str,
                trace: Optional[Dict[str, tuple]]) -> np.ndarray:
        out = h
        n = len(skips)
        for i in range(n):
            skip = skips[n - 1 - i]
            w = self._sub(f"{branch}.skip.{i}.")
            tap = layers.conv1x1(skip, w["weight"], w["bias"])
            out = layers.trgconv_forward(np.concatenate([tap, out], axis=0), self._sub(f"{branch}.{i}."),
                                         output_padding=bool(self.output_padding[i]))
            _record(trace, f"{branch}.{i}", out)
        return out


def _record(trace: Optional[Dict[str, tuple]], name: str, value: np.ndarray) -> None:
    if trace is not None:
        trace[name] = tuple(value.shape)


def forward(model: GftnnModel, feat: FeatureTensor) -> Tuple[Spectrogram, VadLogits]:
    return model.forward(feat)


def vad_probabilities(P: VadLogits) -> np.ndarray:
    """Row softmax of T×2 logits; column 1 is the speech-active probability."""
    return softmax(np.asarray(P, dtype=np.float64), axis=-1)


def load_weights(container: WeightContainer, arch: ModelArch) -> GftnnModel:
    return GftnnModel(container, arch)


def random_model(seed: int, arch: ModelArch) -> GftnnModel:
    return GftnnModel(init_random(seed, arch), arch)


def load_model(path: str, arch: ModelArch) -> GftnnModel:
    """Reads a GFTW file and builds the model; any mismatch raises ModelLoadError."""
    return GftnnModel(read_weights(path), arch)
