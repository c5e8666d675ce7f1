"""Weight importance, global-threshold masks and the cubic sparsity schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .exceptions import DimensionError, StructureError

NORM_EPS = 1e-9


class ImportanceCriterion(str, Enum):
    MAGNITUDE = "magnitude"
    L2_NORMALIZED_MAGNITUDE = "l2_normalized_magnitude"
    LAMP = "lamp"


DEFAULT_CRITERION = ImportanceCriterion.L2_NORMALIZED_MAGNITUDE


@dataclass(frozen=True)
class ScheduleConfig:
    s_i: float = 0.1
    s_f: float = 0.5
    T: int = 10

    def __post_init__(self):
        if not (0.0 <= self.s_i < 1.0) or not (0.0 <= self.s_f <= 1.0):
            raise ValueError(f"sparsity rates out of range: s_i={self.s_i}, s_f={self.s_f}")
        if self.s_i > self.s_f:
            raise ValueError(f"s_i ({self.s_i}) must not exceed s_f ({self.s_f})")
        if int(self.T) != self.T or self.T < 1:
            raise ValueError(f"T must be a positive integer, got {self.T}")


def schedule_sparsity(t, cfg):
    """Global sparsity at iteration ``t``: s_f + (s_i - s_f) * (1 - t/T)**3."""
    if not 0 <= t <= cfg.T:
        raise ValueError(f"iteration {t} outside [0, {cfg.T}]")
    # endpoints are returned verbatim; the closed form loses an ulp at t=0
    if t == 0:
        return float(cfg.s_i)
    if t == cfg.T:
        return float(cfg.s_f)
    return cfg.s_f + (cfg.s_i - cfg.s_f) * (1.0 - t / cfg.T) ** 3


def _lamp(w):
    """LAMP score: w_u^2 / sum of w_v^2 over all v in the layer with |w_v| >= |w_u|."""
    sq = np.square(w.astype(np.float64)).ravel()
    order = np.argsort(sq, kind="stable")
    sorted_sq = sq[order]
    suffix = np.cumsum(sorted_sq[::-1])[::-1]
    # equal magnitudes share the suffix sum of their whole tie group
    group_start = np.searchsorted(sorted_sq, sorted_sq, side="left")
    denom = suffix[group_start]
    scores_sorted = np.divide(sorted_sq, denom, out=np.zeros_like(sorted_sq), where=denom > 0)
    scores = np.empty_like(scores_sorted)
    scores[order] = scores_sorted
    return scores.reshape(w.shape)


def layer_importance(w, criterion=DEFAULT_CRITERION):
    criterion = ImportanceCriterion(criterion)
    w = np.asarray(w, dtype=np.float64)
    if criterion is ImportanceCriterion.MAGNITUDE:
        return np.abs(w)
    if criterion is ImportanceCriterion.L2_NORMALIZED_MAGNITUDE:
        return np.abs(w) / (np.sqrt(np.sum(w * w)) + NORM_EPS)
    return _lamp(w)


def prunable_names(model, exclude=()):
    exclude = set(exclude)
    return [layer.name for layer in model.prunable_layers() if layer.name not in exclude]


def importance_scores(model, criterion=DEFAULT_CRITERION, exclude=()):
    """Per-layer importance tensors (float64) keyed by layer name, in model order.

    Layers named in ``exclude`` are left out and therefore never pruned.
    """
    names = prunable_names(model, exclude)
    if not model.prunable_layers():
        raise StructureError("model has no prunable layers")
    return {name: layer_importance(model.layer(name).weights, criterion) for name in names}


def prune_count(target_sparsity, n_total):
    # 1e-9 absorbs representation error such as 0.29 * 100 = 28.999...
    return min(n_total, int(math.floor(target_sparsity * n_total + 1e-9)))


def select_global_masks(scores, target_sparsity):
    """Prune the globally lowest-scoring ``floor(s * N)`` weights.

    Ties are resolved by (layer order, flat index) so the result is fully
    determined by ``scores``. Returns a dict of float32 {0, 1} masks.
    """
    if not 0.0 <= target_sparsity <= 1.0:
        raise ValueError(f"target sparsity {target_sparsity} outside [0, 1]")
    names = list(scores)
    if not names:
        return {}
    flat = np.concatenate([np.asarray(scores[n], dtype=np.float64).ravel() for n in names])
    k = prune_count(target_sparsity, flat.size)
    keep = np.ones(flat.size, dtype=np.float32)
    keep[np.argsort(flat, kind="stable")[:k]] = 0.0
    masks, offset = {}, 0
    for n in names:
        shape = np.shape(scores[n])
        size = int(np.prod(shape))
        masks[n] = keep[offset:offset + size].reshape(shape)
        offset += size
    return masks


def enforce_superset(new_masks, old_masks):
    """Keep previously pruned weights pruned (zeros of ``old_masks`` stay zero)."""
    return {n: m * old_masks[n] if n in old_masks else m for n, m in new_masks.items()}


def apply_masks(model, masks):
    """Return a copy of ``model`` with masked weights zeroed."""
    out = model.copy()
    for name, mask in masks.items():
        layer = out.layer(name)
        mask = np.asarray(mask, dtype=np.float32)
        if mask.shape != layer.weights.shape:
            raise DimensionError(
                f"mask for {name!r} has shape {mask.shape}, weights have {layer.weights.shape}"
            )
        layer.weights = masked(layer.weights, mask)
    return out


def masked(w, mask):
    """``w * mask`` but with pruned entries written as +0.0 (never -0.0)."""
    return np.where(np.asarray(mask) != 0, w, np.float32(0.0)).astype(np.float32)


def mask_sparsity(masks):
    total = sum(m.size for m in masks.values())
    if total == 0:
        return 0.0
    return sum(int(m.size - np.count_nonzero(m)) for m in masks.values()) / total


def layer_sparsity(masks):
    return {n: float(1.0 - np.count_nonzero(m) / m.size) for n, m in masks.items()}
