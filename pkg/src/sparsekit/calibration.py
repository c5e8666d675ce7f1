"""Layer-wise fine-tuning of pruned layers against cached dense activations.

Each prunable layer is tuned on its own: the inputs it saw in the dense
model are replayed through the masked layer and its output is pulled toward
the dense output with a summed squared error, optimised by Adam.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .exceptions import ConfigError, NumericError
from .model import forward_with_capture
from .sparsity import masked
from .tensor import AdamState, adam_step, layer_local_gradients, linear_response

log = logging.getLogger(__name__)


@dataclass
class TuneConfig:
    lr_weights: float = 1e-5
    lr_bias: float = 1e-4
    batch_size: int = 50
    steps_per_iteration: int = 30
    weight_decay: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.lr_weights <= 0 or self.lr_bias <= 0:
            raise ConfigError("learning rates must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.steps_per_iteration < 0:
            raise ConfigError("steps_per_iteration must be >= 0")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")


@dataclass
class LayerCache:
    """Dense inputs and pre-bias dense outputs of one layer, batch by batch.

    ``targets`` may be empty when the cache was built under a byte cap; they
    are then recomputed from ``dense_weights`` on demand.
    """

    name: str
    inputs: list
    targets: list
    dense_weights: np.ndarray
    dense_bias: np.ndarray
    _layer: object = field(default=None, repr=False)

    def __len__(self):
        return len(self.inputs)

    def target(self, i):
        if self.targets:
            return self.targets[i]
        return linear_response(self._layer, self.inputs[i], self.dense_weights).astype(np.float32)

    def nbytes(self):
        return sum(a.nbytes for a in self.inputs) + sum(a.nbytes for a in self.targets)


def _batches(calib_inputs, batch_size):
    if isinstance(calib_inputs, (list, tuple)):
        return [np.asarray(b, dtype=np.float32) for b in calib_inputs]
    pool = np.asarray(calib_inputs, dtype=np.float32)
    return [pool[i:i + batch_size] for i in range(0, len(pool), batch_size)]


def build_layer_cache(dense_model, calib_inputs, batch_size=50, layers=None, max_bytes=None):
    """Capture per-layer dense inputs / pre-bias outputs for fine-tuning.

    ``calib_inputs`` is either one pool array (split into ``batch_size``
    chunks) or a list of batches.
    """
    batches = _batches(calib_inputs, batch_size)
    if not batches or sum(len(b) for b in batches) == 0:
        raise ValueError("calibration pool is empty")
    if layers is None:
        layers = [layer.name for layer in dense_model.prunable_layers()]
    caches = {}
    if not layers:
        return caches
    inputs = {n: [] for n in layers}
    for batch in batches:
        _, captured = forward_with_capture(dense_model, batch, layers)
        for n in layers:
            inputs[n].append(captured[n][0])
    for n in layers:
        layer = dense_model.layer(n)
        targets = [linear_response(layer, x).astype(np.float32) for x in inputs[n]]
        cache = LayerCache(n, inputs[n], targets, layer.weights.copy(), layer.bias_or_zeros().copy(), layer)
        if max_bytes is not None and cache.nbytes() > max_bytes:
            cache.targets = []
        caches[n] = cache
    return caches


def _residual(layer, x, target_pre, dense_bias):
    # round like the cached targets so an unpruned layer has exactly zero residual
    pred = linear_response(layer, x).astype(np.float32).astype(np.float64)
    pred += _bias_view(layer.bias_or_zeros(), pred.ndim)
    return pred - (target_pre.astype(np.float64) + _bias_view(dense_bias, pred.ndim))


def _bias_view(b, ndim):
    return np.asarray(b, dtype=np.float64).reshape((1, -1) + (1,) * (ndim - 2))


def kd_loss(layer, cache):
    """Mean over cached batches of the summed squared output error.

    The target is the full dense output (pre-bias response plus dense bias),
    so the tuned bias converges to a value consistent with the dense layer.
    """
    losses = [float(np.sum(_residual(layer, cache.inputs[i], cache.target(i), cache.dense_bias) ** 2))
              for i in range(len(cache))]
    return float(np.mean(losses)) if losses else 0.0


def finetune_layer(layer, mask, cache, cfg, rng=None):
    """Run ``cfg.steps_per_iteration`` masked Adam steps on one layer.

    Weight gradients are multiplied by the mask before each step and the mask
    is re-applied afterwards, so pruned weights remain exactly zero.
    Raises :class:`NumericError` (with ``last_state``) if the loss diverges.
    """
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    mask = np.asarray(mask, dtype=np.float32)
    current = layer.copy(weights=masked(layer.weights, mask), bias=layer.bias_or_zeros().copy())
    if cfg.steps_per_iteration == 0 or len(cache) == 0:
        return current
    w_state = AdamState.fresh(current.weights)
    b_state = AdamState.fresh(current.bias)
    order = []
    for _ in range(cfg.steps_per_iteration):
        if not order:
            order = list(rng.permutation(len(cache)))
        i = order.pop(0)
        x = cache.inputs[i]
        r = _residual(current, x, cache.target(i), cache.dense_bias)
        loss = float(np.sum(r * r))
        if not np.isfinite(loss):
            raise NumericError(f"fine-tuning of layer {layer.name!r} diverged", last_state=current)
        grad_w, grad_b = layer_local_gradients(current, x, r)
        if cfg.weight_decay:
            grad_w = grad_w + np.float32(cfg.weight_decay) * current.weights
        grad_w = masked(grad_w, mask)
        try:
            new_w, w_state = adam_step(current.weights, grad_w, w_state, cfg.lr_weights)
            new_b, b_state = adam_step(current.bias, grad_b, b_state, cfg.lr_bias)
        except NumericError as exc:
            raise NumericError(str(exc), last_state=current) from exc
        if not (np.all(np.isfinite(new_w)) and np.all(np.isfinite(new_b))):
            raise NumericError(f"fine-tuning of layer {layer.name!r} diverged", last_state=current)
        current = current.copy(weights=masked(new_w, mask), bias=new_b)
    return current


def finetune_all(sparse_model, masks, caches, cfg, threads=1):
    """Tune every masked layer independently; other layers are left as-is."""
    missing = [n for n in masks if n not in caches]
    if missing:
        raise ConfigError(f"no activation cache for layer(s): {missing}")
    names = list(masks)
    if cfg.steps_per_iteration == 0:
        return sparse_model.copy()

    def tune(name):
        idx = sparse_model.index_of(name)
        rng = np.random.default_rng([cfg.seed, idx])
        return finetune_layer(sparse_model.layer(name), masks[name], caches[name], cfg, rng)

    if threads > 1 and len(names) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            tuned = dict(zip(names, pool.map(tune, names)))
    else:
        tuned = {n: tune(n) for n in names}
    out = sparse_model.copy()
    for name, layer in tuned.items():
        out.layers[out.index_of(name)] = layer
    return out


def total_kd_loss(model, caches, names=None):
    names = list(caches) if names is None else names
    return {n: kd_loss(model.layer(n), caches[n]) for n in names}


__all__ = [
    "TuneConfig", "LayerCache", "build_layer_cache", "finetune_layer", "finetune_all",
    "kd_loss", "total_kd_loss",
]
