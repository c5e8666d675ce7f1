"""Symmetric 8-bit fake quantization.

Weights get one scale per output channel, activations one scale per tensor.
Codes live in [-127, 127]; -128 is never used so the grid is symmetric and
zero maps to zero exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import ConfigError, DimensionError
from .model import Model, forward_with_capture

QMAX = 127
SCALE_FLOOR = 1e-9


@dataclass
class QuantParams:
    scales: np.ndarray  # shape (C,) per-channel, or () per-tensor
    bit_width: int = 8

    def __post_init__(self):
        self.scales = np.asarray(self.scales, dtype=np.float64)
        if np.any(self.scales <= 0):
            raise ValueError("quantization scales must be strictly positive")

    @property
    def per_channel(self):
        return self.scales.ndim == 1


def _scale_from_absmax(absmax):
    absmax = np.asarray(absmax, dtype=np.float64)
    return np.where(absmax > 0, absmax / QMAX, SCALE_FLOOR)


def weight_qparams(w):
    w = np.asarray(w)
    if w.ndim < 2:
        raise DimensionError("per-channel weight quantization needs rank >= 2")
    absmax = np.abs(w.astype(np.float64)).reshape(w.shape[0], -1).max(axis=1)
    return QuantParams(_scale_from_absmax(absmax))


def activation_qparams(captured, layer):
    """Per-tensor scale from the max |input| of ``layer`` over captured batches.

    ``captured`` is a list of :func:`forward_with_capture` results (or a single
    one); the layer's recorded *input* is what gets quantized.
    """
    if isinstance(captured, dict):
        captured = [captured]
    batches = [c[layer][0] for c in captured if layer in c]
    if not batches:
        raise ConfigError(f"no captured activations for layer {layer!r}")
    absmax = max(float(np.max(np.abs(b))) if b.size else 0.0 for b in batches)
    return QuantParams(_scale_from_absmax(absmax))


def quantize_codes(t, q):
    t = np.asarray(t, dtype=np.float64)
    scale = q.scales
    if q.per_channel:
        if t.shape[0] != scale.shape[0]:
            raise DimensionError(f"{scale.shape[0]} scales for {t.shape[0]} channels")
        scale = scale.reshape((-1,) + (1,) * (t.ndim - 1))
    return np.clip(np.rint(t / scale), -QMAX, QMAX), scale


def fake_quantize(t, q):
    """clamp(round_half_even(t / scale), -127, 127) * scale, as float32."""
    codes, scale = quantize_codes(t, q)
    # +0.0 keeps -0.0 codes from producing negative zeros
    return (codes * scale + 0.0).astype(np.float32)


def fake_quantize_activations(x, scale):
    return fake_quantize(x, QuantParams(scale))


def _sparsity_preserving(w):
    """Fake-quantize ``w`` per channel, keeping the zero pattern exactly.

    Nonzero weights smaller than half a step would round to code 0 and raise
    the sparsity; they get the nearest nonzero code (+-1) instead.
    """
    q = weight_qparams(w)
    codes, scale = quantize_codes(w, q)
    codes = np.where((codes == 0) & (w != 0), np.sign(w), codes)
    return (codes * scale + 0.0).astype(np.float32)


def quantize_model(model, calib_inputs, batch_size=100, activation_scales=None):
    """Fake-quantize every prunable layer's weights and record input scales.

    Activation scales go to ``metadata["activation_scales"]`` (layer name to
    float) and are applied by the forward pass. They are measured on the
    float model, before any activation quantization, unless given explicitly
    in ``activation_scales``.
    """
    calib = np.asarray(calib_inputs, dtype=np.float32)
    if len(calib) == 0:
        raise ValueError("calibration pool is empty")
    float_model = model.copy()
    float_model.metadata.pop("activation_scales", None)
    names = [layer.name for layer in float_model.prunable_layers()]
    if activation_scales is None:
        captured = [forward_with_capture(float_model, calib[i:i + batch_size], names)[1]
                    for i in range(0, len(calib), batch_size)]
        scales = {n: float(activation_qparams(captured, n).scales) for n in names}
    else:
        missing = set(names) - set(activation_scales)
        if missing:
            raise ConfigError(f"no activation scale for layer(s): {sorted(missing)}")
        scales = {n: float(QuantParams(activation_scales[n]).scales) for n in names}
    out = float_model.copy()
    for layer in out.prunable_layers():
        layer.weights = _sparsity_preserving(layer.weights)
    out.metadata["activation_scales"] = scales
    return Model(out.layers, out.input_shape, out.num_classes, out.metadata)
