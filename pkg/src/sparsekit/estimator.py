"""scikit-learn style front end for post-training pruning.

:class:`PostTrainingPruner` wraps a dense :class:`~sparsekit.model.Model`.
``fit`` runs the iterative prune / correct / fine-tune loop on a calibration
pool; the fitted estimator then behaves like a classifier over the pruned
(and optionally fake-quantized) network.
"""

from __future__ import annotations

import logging
import os
import time

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted
from threadpoolctl import threadpool_limits

from .calibration import TuneConfig, build_layer_cache, finetune_all, kd_loss
from .correction import adapt_batchnorm, correct_activation_bias, correct_model_weights
from .exceptions import DimensionError, PipelineStageError, SparsekitError
from .metrics import topk_accuracy
from .model import Model, fuse_batchnorm, load_bundle, predict_logits
from .quantization import quantize_model
from .sparsity import (
    ImportanceCriterion,
    ScheduleConfig,
    apply_masks,
    enforce_superset,
    importance_scores,
    layer_sparsity,
    mask_sparsity,
    prunable_names,
    schedule_sparsity,
    select_global_masks,
)

log = logging.getLogger(__name__)

THREADS_ENV = "SPARSEKIT_THREADS"


def resolve_threads(n_threads=None):
    if n_threads is not None:
        return max(1, int(n_threads))
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


def check_inputs(X, model):
    """Validate a batch against the model input shape; returns float32 NCHW."""
    X = check_array(X, allow_nd=True, dtype=np.float32, ensure_2d=False)
    if X.ndim < 2:
        raise DimensionError(f"expected a batch of inputs, got shape {X.shape}")
    if model.input_shape and tuple(X.shape[1:]) != model.input_shape:
        raise DimensionError(f"inputs of shape {X.shape[1:]} do not match model input {model.input_shape}")
    return X


class PostTrainingPruner(ClassifierMixin, BaseEstimator):
    """Iterative post-training unstructured pruning with layer-wise calibration.

    Each of ``n_iterations`` rounds raises the global sparsity along a cubic
    ramp from ``initial_sparsity`` to ``target_sparsity``, recomputes the masks
    from the current weights, repairs weight statistics and biases, and
    fine-tunes every pruned layer against the dense model's activations.

    Parameters
    ----------
    model : Model or path-like
        Dense network (or a bundle directory).
    criterion : {"l2_normalized_magnitude", "magnitude", "lamp"}
    max_accuracy_drop : float, optional
        Stop early once top-1 accuracy on the ``fit`` evaluation set falls
        more than this many points (fraction, e.g. 0.01) below the dense
        model; the last passing model is kept.
    n_threads : int, optional
        Worker threads; defaults to ``$SPARSEKIT_THREADS`` or 1.

    Attributes
    ----------
    model_ : Model
        Pruned float model.
    quantized_model_ : Model or None
    masks_ : dict of ndarray
    history_ : list of dict
        One record per executed iteration.
    """

    def __init__(
        self,
        model=None,
        target_sparsity=0.5,
        initial_sparsity=0.1,
        n_iterations=10,
        criterion="l2_normalized_magnitude",
        exclude_layers=(),
        weight_correction=True,
        bias_correction=True,
        bn_adaptation=False,
        finetune=True,
        quantize=False,
        fuse_bn=False,
        strict_masks=False,
        lr_weights=1e-5,
        lr_bias=1e-4,
        batch_size=50,
        steps_per_iteration=30,
        weight_decay=0.0,
        max_accuracy_drop=None,
        max_cache_bytes=None,
        n_threads=None,
        random_state=0,
    ):
        self.model = model
        self.target_sparsity = target_sparsity
        self.initial_sparsity = initial_sparsity
        self.n_iterations = n_iterations
        self.criterion = criterion
        self.exclude_layers = exclude_layers
        self.weight_correction = weight_correction
        self.bias_correction = bias_correction
        self.bn_adaptation = bn_adaptation
        self.finetune = finetune
        self.quantize = quantize
        self.fuse_bn = fuse_bn
        self.strict_masks = strict_masks
        self.lr_weights = lr_weights
        self.lr_bias = lr_bias
        self.batch_size = batch_size
        self.steps_per_iteration = steps_per_iteration
        self.weight_decay = weight_decay
        self.max_accuracy_drop = max_accuracy_drop
        self.max_cache_bytes = max_cache_bytes
        self.n_threads = n_threads
        self.random_state = random_state

    # ------------------------------------------------------------------ helpers

    def _dense_model(self):
        if self.model is None:
            raise ValueError("PostTrainingPruner needs a model")
        model = self.model if isinstance(self.model, Model) else load_bundle(self.model)
        return fuse_batchnorm(model) if self.fuse_bn else model.copy()

    def _tune_config(self, iteration):
        seed = int(np.random.SeedSequence([int(self.random_state), iteration]).generate_state(1)[0])
        return TuneConfig(
            lr_weights=self.lr_weights, lr_bias=self.lr_bias, batch_size=self.batch_size,
            steps_per_iteration=self.steps_per_iteration, weight_decay=self.weight_decay, seed=seed,
        )

    @staticmethod
    def _stage(name, t, fn, *args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except SparsekitError as exc:
            if isinstance(exc, PipelineStageError):
                raise
            raise PipelineStageError(name, t, exc) from exc

    # ---------------------------------------------------------------------- fit

    def fit(self, X, y=None, X_eval=None, y_eval=None):
        """Prune using calibration inputs ``X`` (labels ``y`` are ignored).

        ``X_eval``/``y_eval`` enable per-iteration accuracy tracking and the
        ``max_accuracy_drop`` stopping rule.
        """
        threads = resolve_threads(self.n_threads)
        with threadpool_limits(limits=threads):
            return self._fit(X, X_eval, y_eval, threads)

    def _fit(self, X, X_eval, y_eval, threads):
        criterion = ImportanceCriterion(self.criterion)
        schedule = ScheduleConfig(self.initial_sparsity, self.target_sparsity, self.n_iterations)
        dense = self._stage("load", 0, self._dense_model)
        X = check_inputs(X, dense)
        if len(X) == 0:
            raise ValueError("calibration pool is empty")
        evaluating = X_eval is not None and y_eval is not None
        if self.max_accuracy_drop is not None and not evaluating:
            raise ValueError("max_accuracy_drop requires X_eval and y_eval")
        if evaluating:
            X_eval = check_inputs(X_eval, dense)
            y_eval = np.asarray(y_eval)

        timings = {}
        t0 = time.perf_counter()
        names = prunable_names(dense, self.exclude_layers)
        caches = self._stage("capture", 0, build_layer_cache, dense, X, self.batch_size, names,
                             self.max_cache_bytes)
        dense_inputs = {n: np.concatenate(c.inputs) for n, c in caches.items()}
        timings["capture"] = time.perf_counter() - t0

        self.dense_accuracy_ = None
        if evaluating:
            self.dense_accuracy_ = topk_accuracy(predict_logits(dense, X_eval), y_eval, 1)

        sparse = dense.copy()
        masks = {n: np.ones_like(dense.layer(n).weights) for n in names}
        history = []
        self.stopped_early_ = False
        for t in range(1, schedule.T + 1):
            start = time.perf_counter()
            s_t = schedule_sparsity(t, schedule)
            scores = self._stage("score", t, importance_scores, sparse, criterion, self.exclude_layers)
            new_masks = self._stage("mask", t, select_global_masks, scores, s_t)
            if self.strict_masks:
                new_masks = enforce_superset(new_masks, masks)
            candidate = self._stage("apply_masks", t, apply_masks, sparse, new_masks)
            if self.weight_correction:
                candidate = self._stage("weight_correction", t, correct_model_weights,
                                        dense, candidate, new_masks)
            if self.bias_correction:
                candidate = self._stage("bias_correction", t, correct_activation_bias,
                                        dense, candidate, None, names, dense_inputs)
            if self.bn_adaptation:
                candidate = self._stage("bn_adaptation", t, adapt_batchnorm, candidate, X)
            loss_before = float(np.mean([kd_loss(candidate.layer(n), caches[n]) for n in names])) if names else 0.0
            if self.finetune:
                candidate = self._stage("finetune", t, finetune_all, candidate, new_masks, caches,
                                        self._tune_config(t), threads)
            loss_after = float(np.mean([kd_loss(candidate.layer(n), caches[n]) for n in names])) if names else 0.0
            record = {
                "iteration": t,
                "target_sparsity": s_t,
                "achieved_sparsity": mask_sparsity(new_masks),
                "layer_sparsity": layer_sparsity(new_masks),
                "kd_loss_before": loss_before,
                "kd_loss_after": loss_after,
            }
            if evaluating:
                record["accuracy"] = topk_accuracy(predict_logits(candidate, X_eval), y_eval, 1)
            timings[f"iteration_{t}"] = time.perf_counter() - start
            history.append(record)
            log.info("iteration %d: target %.4f achieved %.4f kd %.4g -> %.4g%s", t, s_t,
                     record["achieved_sparsity"], loss_before, loss_after,
                     f" acc {record['accuracy']:.4f}" if evaluating else "")
            if self.max_accuracy_drop is not None and \
                    self.dense_accuracy_ - record["accuracy"] > self.max_accuracy_drop:
                record["accepted"] = False
                self.stopped_early_ = True
                break
            record["accepted"] = True
            sparse, masks = candidate, new_masks

        self.model_ = sparse
        self.masks_ = masks
        self.history_ = history
        self.quantized_model_ = None
        if self.quantize:
            start = time.perf_counter()
            self.quantized_model_ = self._stage("quantize", len(history), quantize_model, sparse, X)
            timings["quantize"] = time.perf_counter() - start
        self.sparsity_ = mask_sparsity(masks)
        self.timings_ = timings
        self.classes_ = np.arange(dense.num_classes) if dense.num_classes else None
        return self

    # ---------------------------------------------------------------- inference

    @property
    def final_model_(self):
        check_is_fitted(self, "model_")
        return self.quantized_model_ if self.quantized_model_ is not None else self.model_

    def decision_function(self, X):
        model = self.final_model_
        return predict_logits(model, check_inputs(X, model))

    transform = decision_function

    def predict(self, X):
        return np.argmax(self.decision_function(X), axis=1)

    def score(self, X, y, sample_weight=None):
        return topk_accuracy(self.decision_function(X), y, 1)
