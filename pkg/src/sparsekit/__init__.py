"""Post-training unstructured pruning with layer-wise calibration."""

__version__ = "0.1.0"

from .calibration import LayerCache, TuneConfig, build_layer_cache, finetune_all, finetune_layer
from .correction import (
    adapt_batchnorm,
    correct_activation_bias,
    correct_weight_statistics,
)
from .estimator import PostTrainingPruner
from .model import (
    Model,
    forward,
    forward_with_capture,
    fuse_batchnorm,
    load_bundle,
    save_bundle,
)
from .pipeline import PipelineConfig, ablation_compare, evaluate_topk, run_pipeline
from .quantization import activation_qparams, fake_quantize, quantize_model, weight_qparams
from .sparsity import (
    ImportanceCriterion,
    ScheduleConfig,
    apply_masks,
    importance_scores,
    schedule_sparsity,
    select_global_masks,
)
from .tensor import AdamState, LayerSpec, adam_step, layer_forward, layer_local_gradients

__all__ = [
    "AdamState", "LayerCache", "LayerSpec", "Model", "ImportanceCriterion", "PipelineConfig",
    "PostTrainingPruner", "ScheduleConfig", "TuneConfig", "ablation_compare",
    "activation_qparams", "adam_step", "adapt_batchnorm", "apply_masks", "build_layer_cache",
    "correct_activation_bias", "correct_weight_statistics", "evaluate_topk", "fake_quantize",
    "finetune_all", "finetune_layer", "forward", "forward_with_capture", "fuse_batchnorm",
    "importance_scores", "layer_forward", "layer_local_gradients", "load_bundle", "quantize_model",
    "run_pipeline", "save_bundle", "schedule_sparsity", "select_global_masks", "weight_qparams",
]
