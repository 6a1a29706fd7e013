# backend/postfilter/layers.py
# Numpy forward passes of the post-filter building blocks. Tensors are channel-first
# (C, T, F); weights follow the PyTorch layouts (Conv2d: out, in, kt, kf;
# ConvTranspose2d: in, out, kt, kf; LSTM gate order i, f, g, o).
import logging
from typing import Dict, Optional

import numpy as np
from scipy.special import expit

from backend.exceptions import ShapeError

logger = logging.getLogger(__name__)

KERNEL_T = 2
KERNEL_F = 3
FREQ_STRIDE = 2
LAYER_NORM_EPS = 1e-5

Weights = Dict[str, np.ndarray]


def _check(condition: bool, message: str) -> None:
    if not condition:
        raise ShapeError(message)


def prelu(x: np.ndarray, alpha: np.ndarray) -> np.ndarray:
    """Channel-wise PReLU on a (C, T, F) tensor."""
    return np.where(x >= 0, x, alpha[:, None, None] * x)


def layer_norm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, axis: int = -1) -> np.ndarray:
    mean = np.mean(x, axis=axis, keepdims=True)
    var = np.var(x, axis=axis, keepdims=True)
    shape = [1] * x.ndim
    shape[axis] = -1
    return (x - mean) / np.sqrt(var + LAYER_NORM_EPS) * gamma.reshape(shape) + beta.reshape(shape)


# --- Convolutions ---
def causal_conv2d(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Kernel (2, 3), stride (1, 2), one past frame of zero padding, no frequency padding."""
    _check(x.ndim == 3, f"conv input must be (C, T, F), got {x.shape}")
    c_out, c_in, kt, kf = weight.shape
    _check(x.shape[0] == c_in, f"conv expects {c_in} input channels, got {x.shape[0]}")
    _check(x.shape[2] >= kf, f"conv needs at least {kf} frequency bins, got {x.shape[2]}")
    n_t, n_f = x.shape[1], x.shape[2]
    f_out = (n_f - kf) // FREQ_STRIDE + 1
    x_pad = np.concatenate([np.zeros((c_in, kt - 1, n_f)), x], axis=1)
    out = np.zeros((c_out, n_t, f_out))
    for i in range(kt):
        for j in range(kf):
            patch = x_pad[:, i:i + n_t, j:j + FREQ_STRIDE * (f_out - 1) + 1:FREQ_STRIDE]
            out += np.tensordot(weight[:, :, i, j], patch, axes=([1], [0]))
    return out + bias[:, None, None]


def causal_conv_transpose2d(x: np.ndarray, weight: np.ndarray, bias: np.ndarray,
                            output_padding: int = 0) -> np.ndarray:
    """Transposed kernel (2, 3), stride (1, 2): F_out = 2F + 1 + output_padding; the trailing frame is dropped."""
    _check(x.ndim == 3, f"transposed conv input must be (C, T, F), got {x.shape}")
    c_in, c_out, kt, kf = weight.shape
    _check(x.shape[0] == c_in, f"transposed conv expects {c_in} input channels, got {x.shape[0]}")
    n_t, n_f = x.shape[1], x.shape[2]
    f_out = (n_f - 1) * FREQ_STRIDE + kf + output_padding
    out = np.zeros((c_out, n_t + kt - 1, f_out))
    for i in range(kt):
        for j in range(kf):
            contrib = np.tensordot(weight[:, :, i, j], x, axes=([0], [0]))
            out[:, i:i + n_t, j:j + FREQ_STRIDE * (n_f - 1) + 1:FREQ_STRIDE] += contrib
    return out[:, :n_t] + bias[:, None, None]


def conv1x1(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    _check(x.shape[0] == weight.shape[1], f"1x1 conv expects {weight.shape[1]} channels, got {x.shape[0]}")
    return np.tensordot(weight[:, :, 0, 0], x, axes=([1], [0])) + bias[:, None, None]


def gconv_forward(x: np.ndarray, weights: Weights) -> np.ndarray:
    """Gated conv: conv(x) * sigmoid(gate(x)), then PReLU when the block has one."""
    out = causal_conv2d(x, weights["conv.weight"], weights["conv.bias"])
    out = out * expit(causal_conv2d(x, weights["gate.weight"], weights["gate.bias"]))
    if "prelu.weight" in weights:
        out = prelu(out, weights["prelu.weight"])
    return out


def trgconv_forward(x: np.ndarray, weights: Weights, output_padding: bool = False) -> np.ndarray:
    op = 1 if output_padding else 0
    out = causal_conv_transpose2d(x, weights["conv.weight"], weights["conv.bias"], op)
    out = out * expit(causal_conv_transpose2d(x, weights["gate.weight"], weights["gate.bias"], op))
    if "prelu.weight" in weights:
        out = prelu(out, weights["prelu.weight"])
    return out


# --- Recurrences ---
def lstm_forward(seq: np.ndarray, weights: Weights) -> np.ndarray:
    """Unidirectional LSTM over axis 0 of (S, B, I); returns hidden states (S, B, H)."""
    w_ih, w_hh = weights["weight_ih"], weights["weight_hh"]
    bias = weights["bias_ih"] + weights["bias_hh"]
    hidden = w_hh.shape[1]
    _check(seq.ndim == 3 and seq.shape[2] == w_ih.shape[1],
           f"LSTM expects input size {w_ih.shape[1]}, got shape {seq.shape}")
    n_steps, batch = seq.shape[0], seq.shape[1]
    # Input projections for every step at once; the recurrence only adds h @ w_hh
    x_proj = seq @ w_ih.T + bias
    h = np.zeros((batch, hidden))
    c = np.zeros((batch, hidden))
    out = np.empty((n_steps, batch, hidden))
    for step in range(n_steps):
        gates = x_proj[step] + h @ w_hh.T
        i = expit(gates[:, :hidden])
        f = expit(gates[:, hidden:2 * hidden])
        g = np.tanh(gates[:, 2 * hidden:3 * hidden])
        o = expit(gates[:, 3 * hidden:])
        c = f * c + i * g
        h = o * np.tanh(c)
        out[step] = h
    return out


def _recurrent_path(seq: np.ndarray, weights: Weights, prefix: str) -> np.ndarray:
    """LSTM -> linear projection -> LayerNorm over channels; seq is (S, B, C)."""
    h = lstm_forward(seq, sub_weights(weights, f"{prefix}_lstm."))
    h = h @ weights[f"{prefix}_proj.weight"].T + weights[f"{prefix}_proj.bias"]
    return layer_norm(h, weights[f"{prefix}_norm.weight"], weights[f"{prefix}_norm.bias"])


def ftlstm_forward(x: np.ndarray, weights: Weights) -> np.ndarray:
    """
    F-LSTM along frequency inside each frame, then T-LSTM causally along time per bin;
    each path is projected, layer-normed and added back to its input.
    """
    _check(x.ndim == 3, f"FTLSTM input must be (C, T, F), got {x.shape}")
    # (C, T, F) -> (F, T, C): frequency is the sequence, frames are the batch
    seq = np.transpose(x, (2, 1, 0))
    seq = seq + _recurrent_path(seq, weights, "f")
    # (F, T, C) -> (T, F, C): time is the sequence, bins are the batch
    seq = np.transpose(seq, (1, 0, 2))
    seq = seq + _recurrent_path(seq, weights, "t")
    return np.transpose(seq, (2, 0, 1))


# --- VAD head ---
def vad_forward(h: np.ndarray, weights: Weights, trace: Optional[Dict[str, tuple]] = None) -> np.ndarray:
    """
    Frame-wise VAD on the FTLSTM output (C, T, 9); every recurrence runs along the channel
    axis inside a frame, so the head is causal. Returns T×2 logits.
    """
    _check(h.ndim == 3, f"VAD input must be (C, T, F), got {h.shape}")
    n_c, n_t, n_f = h.shape
    w_in = weights["f_dense_in.weight"]
    _check(w_in.shape[1] == n_f, f"VAD F-Dense expects {w_in.shape[1]} bins, got {n_f}")
    group = 4

    x = np.transpose(h, (1, 0, 2))                                   # T×C×F
    hp = x @ w_in.T + weights["f_dense_in.bias"]                     # T×C×16
    _record(trace, "vad.f_dense_in", hp)
    pool_in = hp.reshape(n_t, group * n_c, group)                    # T×4C×4
    _record(trace, "vad.reshape_in", pool_in)
    pooled = pool_in.max(axis=2, keepdims=True)                      # T×4C×1
    _record(trace, "vad.maxpool", pooled)
    pooled = pooled.reshape(n_t, n_c, group)                         # T×C×4
    _record(trace, "vad.reshape_out", pooled)

    # Recurrence over the channel axis: sequence C, batch T, input 4
    seq = np.transpose(pooled, (1, 0, 2))
    lstm_out = lstm_forward(seq, sub_weights(weights, "f_lstm."))
    gate = lstm_out @ weights["f_proj.weight"].T + weights["f_proj.bias"]
    gate = np.transpose(gate, (1, 0, 2)) + pooled                    # T×C×4
    _record(trace, "vad.f_lstm", gate)

    # G (T×1×4×C) broadcast over H (T×4×4×C): each pooled group of hp scaled by its gate
    hp_groups = hp.reshape(n_t, n_c, group, group)                   # [t, c, a, b] = hp[t, c, 4a + b]
    gated = (hp_groups * gate[:, :, :, None]).reshape(n_t, n_c, group * group)
    _record(trace, "vad.gate", gated)

    out = gated @ weights["f_dense_out.weight"].T + weights["f_dense_out.bias"]   # T×C×1
    _record(trace, "vad.f_dense_out", out)
    logits = out[:, :, 0] @ weights["c_dense.weight"].T + weights["c_dense.bias"]  # T×2
    _record(trace, "vad.c_dense", logits)
    return logits


def _record(trace: Optional[Dict[str, tuple]], name: str, value: np.ndarray) -> None:
    if trace is not None:
        trace[name] = tuple(value.shape)


def sub_weights(weights: Weights, prefix: str) -> Weights:
    """Tensors under prefix, with the prefix stripped."""
    return {name[len(prefix):]: value for name, value in weights.items() if name.startswith(prefix)}
