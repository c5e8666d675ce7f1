"""Layer primitives: forward passes, local gradients and the Adam update.

Tensors are plain ``numpy.float32`` arrays in NCHW layout. Every public
function accumulates in float64 and rounds its result back to float32, so
results depend only on the inputs (no data-dependent summation order).
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .exceptions import DimensionError, NumericError, UnsupportedLayerError

LAYER_KINDS = ("conv2d", "fully_connected", "batchnorm", "relu")
PRUNABLE_KINDS = ("conv2d", "fully_connected")

DEFAULT_BN_EPS = 1e-5


def as_tensor(x, name="tensor"):
    """Return ``x`` as a C-contiguous float32 array, rejecting NaN/Inf."""
    arr = np.ascontiguousarray(x, dtype=np.float32)
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{name} contains non-finite values")
    return arr


@dataclass
class BatchNormParams:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = DEFAULT_BN_EPS

    def __post_init__(self):
        for attr in ("gamma", "beta", "running_mean", "running_var"):
            setattr(self, attr, as_tensor(getattr(self, attr), attr).reshape(-1))
        n = self.gamma.shape[0]
        if any(getattr(self, a).shape[0] != n for a in ("beta", "running_mean", "running_var")):
            raise DimensionError("batchnorm parameter vectors must share one length")
        if np.any(self.running_var < 0):
            raise DimensionError("batchnorm running_var must be non-negative")

    @property
    def num_channels(self):
        return self.gamma.shape[0]

    def copy(self):
        return BatchNormParams(
            self.gamma.copy(), self.beta.copy(), self.running_mean.copy(),
            self.running_var.copy(), self.eps,
        )


@dataclass
class LayerSpec:
    """One layer of a sequential model.

    ``weights`` is ``(out_channels, in_channels, kH, kW)`` for conv2d and
    ``(out_features, in_features)`` for fully_connected. A fully_connected
    layer flattens any trailing input dimensions first.
    """

    kind: str
    name: str = ""
    weights: np.ndarray | None = None
    bias: np.ndarray | None = None
    stride: int = 1
    padding: int = 0
    bn: BatchNormParams | None = None

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise UnsupportedLayerError(f"unsupported layer kind {self.kind!r}")
        if self.weights is not None:
            self.weights = as_tensor(self.weights, f"{self.name} weights")
        if self.bias is not None:
            self.bias = as_tensor(self.bias, f"{self.name} bias").reshape(-1)
        if self.kind == "conv2d":
            if self.weights is None or self.weights.ndim != 4:
                raise DimensionError(f"conv2d layer {self.name!r} needs rank-4 weights")
            if int(self.stride) < 1 or int(self.padding) < 0:
                raise DimensionError(f"conv2d layer {self.name!r}: stride >= 1, padding >= 0")
            self.stride, self.padding = int(self.stride), int(self.padding)
        elif self.kind == "fully_connected":
            if self.weights is None or self.weights.ndim != 2:
                raise DimensionError(f"fully_connected layer {self.name!r} needs rank-2 weights")
        elif self.kind == "batchnorm":
            if self.bn is None:
                raise DimensionError(f"batchnorm layer {self.name!r} has no parameters")
        if self.bias is not None:
            if self.weights is None or self.bias.shape[0] != self.weights.shape[0]:
                raise DimensionError(
                    f"layer {self.name!r}: bias length must equal the output channel count"
                )

    @property
    def prunable(self):
        return self.kind in PRUNABLE_KINDS

    @property
    def out_channels(self):
        if self.prunable:
            return self.weights.shape[0]
        if self.kind == "batchnorm":
            return self.bn.num_channels
        return None

    def bias_or_zeros(self):
        if self.bias is not None:
            return self.bias
        return np.zeros(self.weights.shape[0], dtype=np.float32)

    def copy(self, **changes):
        """Deep copy with optional field overrides."""
        new = replace(
            self,
            weights=None if self.weights is None else self.weights.copy(),
            bias=None if self.bias is None else self.bias.copy(),
            bn=None if self.bn is None else self.bn.copy(),
        )
        for key, value in changes.items():
            setattr(new, key, value)
        new.__post_init__()
        return new


def _channel_view(vec, ndim):
    return vec.reshape((1, -1) + (1,) * (ndim - 2))


def _conv_windows(x, kh, kw, stride, padding):
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    if x.shape[2] < kh or x.shape[3] < kw:
        raise DimensionError(
            f"kernel {kh}x{kw} does not fit padded input of size {x.shape[2]}x{x.shape[3]}"
        )
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride]  # (N, C, oH, oW, kH, kW)


def _check_input(layer, x):
    if layer.kind == "conv2d":
        if x.ndim != 4:
            raise DimensionError(f"conv2d layer {layer.name!r} expects (N, C, H, W) input, got {x.shape}")
        if x.shape[1] != layer.weights.shape[1]:
            raise DimensionError(
                f"conv2d layer {layer.name!r}: input has {x.shape[1]} channels, "
                f"weights expect {layer.weights.shape[1]}"
            )
    elif layer.kind == "fully_connected":
        features = int(np.prod(x.shape[1:])) if x.ndim > 1 else -1
        if features != layer.weights.shape[1]:
            raise DimensionError(
                f"fully_connected layer {layer.name!r}: input has {features} features, "
                f"weights expect {layer.weights.shape[1]}"
            )
    elif layer.kind == "batchnorm":
        if x.ndim < 2 or x.shape[1] != layer.bn.num_channels:
            raise DimensionError(
                f"batchnorm layer {layer.name!r}: expected {layer.bn.num_channels} channels, got {x.shape}"
            )


def linear_response(layer, x, weights=None):
    """Pre-bias output of a conv2d / fully_connected layer, in float64.

    ``weights`` overrides the layer's own weights (used for the
    dense-vs-sparse comparisons of bias correction and fine-tuning).
    """
    if layer.kind not in PRUNABLE_KINDS:
        raise UnsupportedLayerError(f"layer kind {layer.kind!r} has no linear response")
    x = np.asarray(x)
    _check_input(layer, x)
    w = np.asarray(layer.weights if weights is None else weights, dtype=np.float64)
    if w.shape != layer.weights.shape:
        raise DimensionError(f"weight override shape {w.shape} != {layer.weights.shape}")
    if layer.kind == "fully_connected":
        return x.reshape(x.shape[0], -1).astype(np.float64) @ w.T
    _, _, kh, kw = w.shape
    win = _conv_windows(x.astype(np.float64), kh, kw, layer.stride, layer.padding)
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))  # (N, oH, oW, O)
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def layer_forward(layer, input_batch):
    """Apply one layer to a batch and return the float32 output batch."""
    x = np.asarray(input_batch)
    if layer.kind in PRUNABLE_KINDS:
        out = linear_response(layer, x)
        if layer.bias is not None:
            out += _channel_view(layer.bias.astype(np.float64), out.ndim)
    elif layer.kind == "batchnorm":
        _check_input(layer, x)
        bn = layer.bn
        scale = bn.gamma.astype(np.float64) / np.sqrt(bn.running_var.astype(np.float64) + bn.eps)
        shift = bn.beta - bn.running_mean.astype(np.float64) * scale
        out = x * _channel_view(scale, x.ndim) + _channel_view(shift, x.ndim)
    elif layer.kind == "relu":
        out = np.maximum(x, 0)
    else:  # pragma: no cover - guarded by LayerSpec
        raise UnsupportedLayerError(f"unsupported layer kind {layer.kind!r}")
    return np.ascontiguousarray(out, dtype=np.float32)


def layer_local_gradients(layer, input_batch, residual_batch):
    """Gradients of ``sum(residual**2)`` w.r.t. the layer weights and bias.

    ``residual_batch`` is ``prediction - target`` with the shape of
    ``layer_forward(layer, input_batch)``. Returns ``(grad_weights, grad_bias)``.
    """
    if layer.kind not in PRUNABLE_KINDS:
        raise UnsupportedLayerError(f"layer kind {layer.kind!r} has no trainable weights")
    x = np.asarray(input_batch)
    _check_input(layer, x)
    r = np.asarray(residual_batch, dtype=np.float64)
    if layer.kind == "fully_connected":
        expected = (x.shape[0], layer.weights.shape[0])
        if r.shape != expected:
            raise DimensionError(f"residual shape {r.shape} != output shape {expected}")
        x2 = x.reshape(x.shape[0], -1).astype(np.float64)
        grad_w = 2.0 * (r.T @ x2)
        grad_b = 2.0 * r.sum(axis=0)
    else:
        o, _, kh, kw = layer.weights.shape
        win = _conv_windows(x.astype(np.float64), kh, kw, layer.stride, layer.padding)
        expected = (x.shape[0], o, win.shape[2], win.shape[3])
        if r.shape != expected:
            raise DimensionError(f"residual shape {r.shape} != output shape {expected}")
        grad_w = 2.0 * np.tensordot(r, win, axes=([0, 2, 3], [0, 2, 3]))
        grad_b = 2.0 * r.sum(axis=(0, 2, 3))
    return grad_w.astype(np.float32), grad_b.astype(np.float32)


@dataclass
class AdamState:
    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8

    @classmethod
    def fresh(cls, param, **hyper):
        zeros = np.zeros(np.shape(param), dtype=np.float32)
        return cls(zeros, zeros.copy(), **hyper)

    def copy(self):
        return replace(self, first_moment=self.first_moment.copy(),
                       second_moment=self.second_moment.copy())


def adam_step(param, grad, state, learning_rate):
    """One bias-corrected Adam update. Returns ``(new_param, new_state)``.

    Inputs are left untouched. There is deliberately no weight-decay term;
    callers that want L2 regularisation fold it into ``grad``.
    """
    param = np.asarray(param, dtype=np.float32)
    grad = np.asarray(grad)
    if grad.shape != param.shape or state.first_moment.shape != param.shape \
            or state.second_moment.shape != param.shape:
        raise DimensionError(
            f"adam_step shapes differ: param {param.shape}, grad {grad.shape}, "
            f"moments {state.first_moment.shape}/{state.second_moment.shape}"
        )
    if not np.all(np.isfinite(grad)):
        raise NumericError("adam_step received a non-finite gradient")
    g = grad.astype(np.float64)
    t = state.step_count + 1
    m = state.beta1 * state.first_moment.astype(np.float64) + (1.0 - state.beta1) * g
    v = state.beta2 * state.second_moment.astype(np.float64) + (1.0 - state.beta2) * g * g
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    new_param = param.astype(np.float64) - learning_rate * m_hat / (np.sqrt(v_hat) + state.eps_adam)
    new_state = replace(
        state,
        first_moment=m.astype(np.float32),
        second_moment=v.astype(np.float32),
        step_count=t,
    )
    return new_param.astype(np.float32), new_state
