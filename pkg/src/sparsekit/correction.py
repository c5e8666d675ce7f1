"""Statistical repair of a pruned model.

Three independent fixes, applied after masks are chosen:

* per-output-channel affine rescaling of the surviving weights so each
  channel recovers the dense mean and standard deviation;
* one-shot bias correction, which shifts each layer's bias by the change in
  its mean pre-bias response, measured on inputs taken from the *dense*
  model;
* BatchNorm adaptation, which re-estimates running statistics on the
  calibration data.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import DimensionError
from .model import Model, forward_with_capture
from .sparsity import masked
from .tensor import linear_response, layer_forward

STD_EPS = 1e-9


@dataclass
class ChannelStats:
    mean: np.ndarray
    std: np.ndarray


def channel_stats(w):
    """Population mean / std of each leading-axis slice of ``w``."""
    flat = np.asarray(w, dtype=np.float64).reshape(np.shape(w)[0], -1)
    return ChannelStats(flat.mean(axis=1), flat.std(axis=1))


def rescale_channels(w_dense, w_sparse):
    """Affine-correct ``w_sparse`` channel-wise, without re-masking (float64)."""
    dense = channel_stats(w_dense)
    ws = np.asarray(w_sparse, dtype=np.float64).reshape(np.shape(w_sparse)[0], -1)
    lam = dense.std / (ws.std(axis=1) + STD_EPS)
    scaled = lam[:, None] * ws
    corrected = scaled + (dense.mean - scaled.mean(axis=1))[:, None]
    return corrected.reshape(np.shape(w_sparse))


def correct_weight_statistics(w_dense, w_sparse, mask):
    """Restore the dense per-channel mean/std on a pruned weight tensor.

    Statistics cover every element of the channel, zeros included. The mask
    is applied again afterwards so pruned positions stay exactly zero; the
    returned tensor's statistics therefore differ slightly from the dense
    ones whenever the shift is non-zero.
    """
    shapes = {np.shape(w_dense), np.shape(w_sparse), np.shape(mask)}
    if len(shapes) != 1:
        raise DimensionError(f"weight/mask shapes differ: {sorted(shapes)}")
    corrected = rescale_channels(w_dense, w_sparse).astype(np.float32)
    return masked(corrected, mask)


def correct_model_weights(dense_model, sparse_model, masks):
    out = sparse_model.copy()
    for name, mask in masks.items():
        layer = out.layer(name)
        layer.weights = correct_weight_statistics(dense_model.layer(name).weights, layer.weights, mask)
    return out


def _mean_response(layer, x, weights=None):
    y = linear_response(layer, x, weights)
    axes = (0,) if y.ndim == 2 else (0, 2, 3)
    return y.mean(axis=axes)


def capture_dense_inputs(dense_model, calib_inputs, names):
    calib_inputs = np.asarray(calib_inputs, dtype=np.float32)
    if len(calib_inputs) == 0:
        raise ValueError("calibration batch is empty")
    _, captured = forward_with_capture(dense_model, calib_inputs, names)
    return {n: captured[n][0] for n in names}


def correct_activation_bias(dense_model, sparse_model, calib_inputs, layers=None, dense_inputs=None):
    """One-shot bias correction for every prunable layer (or ``layers``).

    b_corr = b_dense + E[f(W_dense, X)] - E[f(W_sparse, X)], where X are the
    layer inputs of the dense model and E averages over batch and spatial
    positions per output channel. Layers without a bias gain one.
    ``dense_inputs`` may hold pre-captured X per layer.
    """
    if layers is None:
        layers = [layer.name for layer in sparse_model.prunable_layers()]
    layers = list(layers)
    if dense_inputs is None:
        dense_inputs = capture_dense_inputs(dense_model, calib_inputs, layers)
    out = sparse_model.copy()
    for name in layers:
        dense_layer = dense_model.layer(name)
        sparse_layer = out.layer(name)
        x = dense_inputs[name]
        if len(x) == 0:
            raise ValueError("calibration batch is empty")
        shift = _mean_response(dense_layer, x) - _mean_response(dense_layer, x, sparse_layer.weights)
        b = dense_layer.bias_or_zeros().astype(np.float64) + shift
        sparse_layer.bias = b.astype(np.float32)
    return out


def mean_output_residual(dense_layer, sparse_layer, x):
    """Per-channel mean of dense minus sparse layer output on the inputs ``x``."""
    yd = layer_forward(dense_layer, x).astype(np.float64)
    ys = layer_forward(sparse_layer, x).astype(np.float64)
    axes = (0,) if yd.ndim == 2 else (0, 2, 3)
    return (yd - ys).mean(axis=axes)


def adapt_batchnorm(model, calib_inputs):
    """Recollect BatchNorm running statistics on ``calib_inputs``.

    Layers are visited in order, so each batchnorm sees inputs produced with
    the already-adapted statistics upstream. Models without batchnorm are
    returned unchanged (as a copy).
    """
    x = np.asarray(calib_inputs, dtype=np.float32)
    if len(x) == 0:
        raise ValueError("calibration batch is empty")
    out = model.copy()
    if not any(layer.kind == "batchnorm" for layer in out.layers):
        return out
    for layer in out.layers:
        if layer.kind == "batchnorm":
            axes = (0,) if x.ndim == 2 else (0, 2, 3)
            x64 = x.astype(np.float64)
            layer.bn.running_mean = x64.mean(axis=axes).astype(np.float32)
            layer.bn.running_var = x64.var(axis=axes).astype(np.float32)
        x = layer_forward(layer, x)
    return Model(out.layers, out.input_shape, out.num_classes, out.metadata)
