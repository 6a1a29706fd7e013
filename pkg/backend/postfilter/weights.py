# backend/postfilter/weights.py
import logging
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Dict, List, Tuple, Union

import numpy as np

from backend.exceptions import ModelLoadError
from backend.schemas.postfilter_schemas import ModelArch

logger = logging.getLogger(__name__)

# --- GFTW file format ---
MAGIC = b"GFTW"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sII")
_NAME_LEN = struct.Struct("<H")
_RANK = struct.Struct("<B")

KERNEL = (2, 3)
VAD_HIDDEN_BINS = 16
VAD_GROUP = 4
PRELU_INIT = 0.25

Shape = Tuple[int, ...]


@dataclass
class WeightContainer:
    """Named float-32 tensors, row-major, in insertion order."""
    tensors: Dict[str, np.ndarray] = field(default_factory=OrderedDict)

    def __len__(self) -> int:
        return len(self.tensors)

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def add(self, name: str, value: np.ndarray) -> None:
        self.tensors[name] = np.ascontiguousarray(value, dtype=np.float32)

    def shapes(self) -> Dict[str, Shape]:
        return {name: tuple(value.shape) for name, value in self.tensors.items()}


# --- Architecture layout ---
def _gconv(prefix: str, c_in: int, c_out: int, prelu: bool, transposed: bool = False) -> List[Tuple[str, Shape, int]]:
    kt, kf = KERNEL
    w_shape = (c_in, c_out, kt, kf) if transposed else (c_out, c_in, kt, kf)
    fan_in = (c_out if transposed else c_in) * kt * kf
    rows = []
    for path in ("conv", "gate"):
        rows.append((f"{prefix}.{path}.weight", w_shape, fan_in))
        rows.append((f"{prefix}.{path}.bias", (c_out,), fan_in))
    if prelu:
        rows.append((f"{prefix}.prelu.weight", (c_out,), 0))
    return rows


def _linear(prefix: str, n_in: int, n_out: int) -> List[Tuple[str, Shape, int]]:
    return [(f"{prefix}.weight", (n_out, n_in), n_in), (f"{prefix}.bias", (n_out,), n_in)]


def _lstm(prefix: str, n_in: int, hidden: int) -> List[Tuple[str, Shape, int]]:
    return [
        (f"{prefix}.weight_ih", (4 * hidden, n_in), hidden),
        (f"{prefix}.weight_hh", (4 * hidden, hidden), hidden),
        (f"{prefix}.bias_ih", (4 * hidden,), hidden),
        (f"{prefix}.bias_hh", (4 * hidden,), hidden),
    ]


def _layout(arch: ModelArch) -> List[Tuple[str, Shape, int]]:
    """(name, shape, fan_in) for every tensor the arch needs; fan_in 0 marks constant-initialised tensors."""
    C = arch.channels
    rows: List[Tuple[str, Shape, int]] = []
    for i in range(arch.encoder_layers):
        rows += _gconv(f"encoder.{i}", arch.input_channels if i == 0 else C, C, prelu=True)
    for j in range(arch.ftlstm_blocks):
        for path in ("f", "t"):
            rows += _lstm(f"ftlstm.{j}.{path}_lstm", C, C)
            rows += _linear(f"ftlstm.{j}.{path}_proj", C, C)
            rows += [(f"ftlstm.{j}.{path}_norm.weight", (C,), 0), (f"ftlstm.{j}.{path}_norm.bias", (C,), 0)]
    for branch in ("real_decoder", "imag_decoder"):
        for i in range(arch.encoder_layers):
            rows.append((f"{branch}.skip.{i}.weight", (C, C, 1, 1), C))
            rows.append((f"{branch}.skip.{i}.bias", (C,), C))
        for i in range(arch.encoder_layers):
            last = i == arch.encoder_layers - 1
            rows += _gconv(f"{branch}.{i}", 2 * C, 1 if last else C, prelu=not last, transposed=True)
    if arch.vad_head and arch.encoder_layers > 0:
        n_f = arch.encoder_freqs()[-1]
        rows += _linear("vad.f_dense_in", n_f, VAD_HIDDEN_BINS)
        rows += _lstm("vad.f_lstm", VAD_GROUP, C)
        rows += _linear("vad.f_proj", C, VAD_GROUP)
        rows += _linear("vad.f_dense_out", VAD_HIDDEN_BINS, 1)
        rows += _linear("vad.c_dense", C, 2)
    return rows


def expected_shapes(arch: ModelArch) -> Dict[str, Shape]:
    """Every tensor name the arch requires, with its shape, in canonical order."""
    return OrderedDict((name, shape) for name, shape, _ in _layout(arch))


def init_random(seed: int, arch: ModelArch) -> WeightContainer:
    """
    Seeded random weights: U(-1/sqrt(fan_in), 1/sqrt(fan_in)) for kernels, linears and LSTMs,
    PReLU slopes 0.25, LayerNorm gain 1 and bias 0.
    """
    rng = np.random.default_rng(seed)
    container = WeightContainer()
    for name, shape, fan_in in _layout(arch):
        if name.endswith("prelu.weight"):
            value = np.full(shape, PRELU_INIT)
        elif "_norm." in name:
            value = np.ones(shape) if name.endswith("weight") else np.zeros(shape)
        else:
            bound = 1.0 / np.sqrt(fan_in)
            value = rng.uniform(-bound, bound, size=shape)
        container.add(name, value)
    logger.debug(f"[Weights] Random init seed={seed}: {len(container)} tensors, {param_count(container)} parameters.")
    return container


def validate(container: WeightContainer, arch: ModelArch) -> None:
    """Strict check: every required tensor present with its shape, no extras."""
    expected = expected_shapes(arch)
    for name, shape in expected.items():
        if name not in container:
            raise ModelLoadError(f"Weight tensor '{name}' is missing (expected shape {shape}).")
        actual = tuple(container[name].shape)
        if actual != shape:
            raise ModelLoadError(f"Weight tensor '{name}' has shape {actual}, expected {shape}.")
        if not np.all(np.isfinite(container[name])):
            raise ModelLoadError(f"Weight tensor '{name}' contains non-finite values.")
    extras = [name for name in container.tensors if name not in expected]
    if extras:
        raise ModelLoadError(f"Unexpected weight tensor '{extras[0]}' ({len(extras)} extra tensor(s)).")


def param_count(source: Union[WeightContainer, "object"]) -> int:
    """Total number of scalars across all tensors of a container or a model."""
    container = getattr(source, "container", source)
    return int(sum(value.size for value in container.tensors.values()))


# --- File I/O ---
def save_weights(path: str, container: WeightContainer) -> None:
    chunks = [_HEADER.pack(MAGIC, FORMAT_VERSION, len(container))]
    for name, value in container.tensors.items():
        encoded = name.encode("utf-8")
        chunks.append(_NAME_LEN.pack(len(encoded)))
        chunks.append(encoded)
        chunks.append(_RANK.pack(value.ndim))
        chunks.append(struct.pack(f"<{value.ndim}I", *value.shape))
        chunks.append(np.ascontiguousarray(value, dtype="<f4").tobytes())
    try:
        with open(path, "wb") as f:
            f.write(b"".join(chunks))
    except OSError as e:
        logger.error(f"[Weights] Could not write {path}: {e}", exc_info=True)
        raise ModelLoadError(f"Could not write weight file {path}: {e}") from e
    logger.info(f"[Weights] Saved {len(container)} tensors to {path}.")


def read_weights(path: str) -> WeightContainer:
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except OSError as e:
        raise ModelLoadError(f"Could not read weight file {path}: {e}") from e

    def take(offset: int, size: int) -> bytes:
        if offset + size > len(blob):
            raise ModelLoadError(f"Weight file {path} is truncated at byte {offset}.")
        return blob[offset:offset + size]

    magic, version, count = _HEADER.unpack(take(0, _HEADER.size))
    if magic != MAGIC:
        raise ModelLoadError(f"{path} is not a GFTW weight file (magic {magic!r}).")
    if version != FORMAT_VERSION:
        raise ModelLoadError(f"{path} has unsupported GFTW version {version}.")
    offset = _HEADER.size
    container = WeightContainer()
    for _ in range(count):
        (name_len,) = _NAME_LEN.unpack(take(offset, _NAME_LEN.size))
        offset += _NAME_LEN.size
        try:
            name = take(offset, name_len).decode("utf-8")
        except UnicodeDecodeError as e:
            raise ModelLoadError(f"Weight file {path} has an undecodable tensor name at byte {offset}.") from e
        offset += name_len
        (rank,) = _RANK.unpack(take(offset, _RANK.size))
        offset += _RANK.size
        dims = struct.unpack(f"<{rank}I", take(offset, 4 * rank))
        offset += 4 * rank
        n_bytes = 4 * int(np.prod(dims, dtype=np.int64))
        data = np.frombuffer(take(offset, n_bytes), dtype="<f4").reshape(dims)
        offset += n_bytes
        if name in container:
            raise ModelLoadError(f"Weight tensor '{name}' appears twice in {path}.")
        container.add(name, data)
    if offset != len(blob):
        raise ModelLoadError(f"Weight file {path} has {len(blob) - offset} trailing bytes.")
    logger.info(f"[Weights] Read {len(container)} tensors from {path}.")
    return container
