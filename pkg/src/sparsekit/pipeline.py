"""End-to-end pruning jobs: configuration, calibration data, reports, ablations."""

from __future__ import annotations

import copy
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from . import __version__
from .assets import resolve_path
from .calibration import TuneConfig
from .data import EvalDataset, PreprocessSpec, load_input_dir, preprocess_batch, sample_pool
from .estimator import PostTrainingPruner
from .exceptions import ConfigError, PipelineStageError, SparsekitError
from .metrics import topk_accuracy
from .model import count_zeros, load_bundle, predict_logits, save_bundle, write_tensor
from .sparsity import ImportanceCriterion, ScheduleConfig
from .syndata import KINDS as SYNTHETIC_KINDS
from .syndata import synthetic_pool

log = logging.getLogger(__name__)

CALIBRATION_SOURCES = ("directory",) + SYNTHETIC_KINDS
TIMING_KEYS = ("timings",)


@dataclass
class CalibrationSource:
    source: str = "directory"
    path: str | None = None
    split: str | None = None
    # synthetic images are rendered at this size, then resized to the model input
    size: int = 128
    n_points: int = 8000

    def __post_init__(self):
        if self.source not in CALIBRATION_SOURCES:
            raise ConfigError(f"calibration source must be one of {CALIBRATION_SOURCES}, got {self.source!r}")
        if self.source == "directory" and not self.path:
            raise ConfigError("calibration source 'directory' needs a path")
        if self.source != "directory" and self.path:
            raise ConfigError("give either a calibration directory or a synthetic source, not both")


def _build(cls, raw, what):
    if isinstance(raw, cls):
        return raw
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        raise ConfigError(f"{what} must be an object")
    known = {f.name for f in fields(cls)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown {what} key(s): {sorted(unknown)}")
    try:
        return cls(**raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {what}: {exc}") from exc


@dataclass
class PipelineConfig:
    """Declarative description of one pruning job (see README for the JSON schema)."""

    model: str = ""
    calibration: CalibrationSource | None = None
    pool_size: int = 300
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    criterion: str = ImportanceCriterion.L2_NORMALIZED_MAGNITUDE.value
    exclude_layers: list = field(default_factory=list)
    weight_correction: bool = True
    activation_bias_correction: bool = True
    bn_adaptation: bool = False
    finetune: bool = True
    quantize: bool = False
    fuse_bn_first: bool = False
    strict_masks: bool = False
    tune: TuneConfig = field(default_factory=TuneConfig)
    max_accuracy_drop: float | None = None
    eval_dataset: str | None = None
    eval_split: str | None = None
    preprocess: dict | None = None
    max_cache_bytes: int | None = None
    threads: int | None = None
    seed: int = 0
    out_dir: str = "sparsekit_out"

    @classmethod
    def from_dict(cls, raw, base_dir=None):
        if not isinstance(raw, dict):
            raise ConfigError("configuration must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown configuration key(s): {sorted(unknown)}")
        raw = dict(raw)
        if "calibration" not in raw:
            raise ConfigError("configuration needs a 'calibration' section")
        raw["calibration"] = _build(CalibrationSource, raw["calibration"], "calibration")
        raw["schedule"] = _build(ScheduleConfig, raw.get("schedule"), "schedule")
        raw["tune"] = _build(TuneConfig, raw.get("tune"), "tune")
        try:
            cfg = cls(**raw)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc
        if base_dir is not None:
            cfg = cfg.resolve_paths(base_dir)
        cfg.validate()
        return cfg

    @classmethod
    def from_file(cls, path):
        path = Path(path)
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read configuration {path}: {exc}") from exc
        return cls.from_dict(raw, base_dir=path.parent)

    def resolve_paths(self, base_dir):
        cfg = copy.deepcopy(self)

        def fix(p):
            if p is None or str(p).startswith("builtin:") or Path(p).is_absolute():
                return p
            return str(Path(base_dir) / p)

        cfg.model = fix(cfg.model)
        cfg.eval_dataset = fix(cfg.eval_dataset)
        cfg.calibration.path = fix(cfg.calibration.path)
        return cfg

    def validate(self):
        if not self.model:
            raise ConfigError("configuration needs a 'model' bundle path")
        if not isinstance(self.calibration, CalibrationSource):
            raise ConfigError("configuration needs exactly one calibration source")
        try:
            ImportanceCriterion(self.criterion)
        except ValueError:
            raise ConfigError(f"unknown criterion {self.criterion!r}") from None
        if self.pool_size < 1:
            raise ConfigError("pool_size must be >= 1")
        if self.max_accuracy_drop is not None and not self.eval_dataset:
            raise ConfigError("max_accuracy_drop requires eval_dataset")
        return self

    def to_dict(self):
        d = asdict(self)
        d["criterion"] = ImportanceCriterion(self.criterion).value
        return d

    def with_overrides(self, deltas):
        """New config with (possibly nested or dotted) keys replaced."""
        d = self.to_dict()
        for key, value in deltas.items():
            _merge(d, key.split(".") if isinstance(key, str) else [key], value)
        return PipelineConfig.from_dict(d)


def _merge(d, path, value):
    head, rest = path[0], path[1:]
    if rest:
        d.setdefault(head, {})
        _merge(d[head], rest, value)
    elif isinstance(value, dict) and isinstance(d.get(head), dict):
        for k, v in value.items():
            _merge(d[head], [k], v)
    else:
        d[head] = value


# --------------------------------------------------------------------------
# data plumbing


def _model_spec(spec, model):
    """Default resize/crop to the model's spatial input size."""
    spec = copy.deepcopy(spec)
    if len(model.input_shape) == 3:
        side = model.input_shape[1]
        spec.resize = spec.resize or side
        spec.crop = spec.crop or side
    return spec


def preprocess_for(cfg, model):
    if cfg.preprocess is not None:
        spec = PreprocessSpec.from_dict(cfg.preprocess)
    elif cfg.eval_dataset:
        spec = EvalDataset.from_manifest(resolve_path(cfg.eval_dataset)).preprocess
    elif cfg.calibration.source == "directory" and \
            (Path(resolve_path(cfg.calibration.path)) / "dataset.json").is_file():
        spec = EvalDataset.from_manifest(resolve_path(cfg.calibration.path)).preprocess
    else:
        spec = PreprocessSpec()
    return _model_spec(spec, model)


def calibration_pool(cfg, model):
    """Preprocessed calibration inputs ``(N, C, H, W)`` for ``cfg``."""
    channels = model.input_shape[0] if model.input_shape else None
    spec = preprocess_for(cfg, model)
    src = cfg.calibration
    if src.source == "directory":
        path = resolve_path(src.path)
        if src.split is not None:
            raw = EvalDataset.from_manifest(path, split=src.split).raw_images()
        else:
            raw = load_input_dir(path)
        raw = sample_pool(raw, cfg.pool_size, cfg.seed)
    else:
        raw = list(synthetic_pool(src.source, cfg.pool_size, src.size, cfg.seed, src.n_points))
    return preprocess_batch(raw, spec, channels)


def load_eval(cfg, model):
    if not cfg.eval_dataset:
        return None, None
    ds = EvalDataset.from_manifest(resolve_path(cfg.eval_dataset), split=cfg.eval_split)
    spec = _model_spec(ds.preprocess, model)
    channels = model.input_shape[0] if model.input_shape else None
    return preprocess_batch(ds.raw_images(), spec, channels), ds.labels()


def evaluate_topk(model, dataset, k=1, split=None):
    """Top-k accuracy of ``model`` on an :class:`EvalDataset`, a manifest path, or ``(X, y)``."""
    if isinstance(dataset, (str, Path)):
        dataset = EvalDataset.from_manifest(resolve_path(dataset), split=split)
    if isinstance(dataset, EvalDataset):
        channels = model.input_shape[0] if model.input_shape else None
        X = preprocess_batch(dataset.raw_images(), _model_spec(dataset.preprocess, model), channels)
        y = dataset.labels()
    else:
        X, y = dataset
    return topk_accuracy(predict_logits(model, X), y, k)


# --------------------------------------------------------------------------
# pipeline


def make_estimator(cfg, model):
    return PostTrainingPruner(
        model=model,
        target_sparsity=cfg.schedule.s_f,
        initial_sparsity=cfg.schedule.s_i,
        n_iterations=cfg.schedule.T,
        criterion=cfg.criterion,
        exclude_layers=tuple(cfg.exclude_layers),
        weight_correction=cfg.weight_correction,
        bias_correction=cfg.activation_bias_correction,
        bn_adaptation=cfg.bn_adaptation,
        finetune=cfg.finetune,
        quantize=cfg.quantize,
        fuse_bn=cfg.fuse_bn_first,
        strict_masks=cfg.strict_masks,
        lr_weights=cfg.tune.lr_weights,
        lr_bias=cfg.tune.lr_bias,
        batch_size=cfg.tune.batch_size,
        steps_per_iteration=cfg.tune.steps_per_iteration,
        weight_decay=cfg.tune.weight_decay,
        max_accuracy_drop=cfg.max_accuracy_drop,
        max_cache_bytes=cfg.max_cache_bytes,
        n_threads=cfg.threads,
        random_state=cfg.seed,
    )


def strip_timings(report):
    return {k: v for k, v in report.items() if k not in TIMING_KEYS}


def _write_report(out_dir, report):
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n",
                                         encoding="utf-8")


def run_pipeline(cfg):
    """Run the full job described by ``cfg``; returns ``(final_model, report)``.

    Writes ``sparse/`` (float bundle), ``masks/``, optionally ``quantized/``
    and ``report.json`` under ``cfg.out_dir``.
    """
    cfg.validate()
    out_dir = Path(cfg.out_dir)
    started = time.perf_counter()
    report = {
        "toolkit_version": __version__,
        "config": cfg.to_dict(),
        "status": "running",
        "artifacts": {},
        "timings": {},
    }
    stage, iteration = "load", 0
    try:
        model = load_bundle(resolve_path(cfg.model))
        stage = "calibration_data"
        pool = calibration_pool(cfg, model)
        stage = "eval_data"
        X_eval, y_eval = load_eval(cfg, model)
        report["timings"]["data"] = time.perf_counter() - started
        stage = "prune"
        est = make_estimator(cfg, model)
        est.fit(pool, X_eval=X_eval, y_eval=y_eval)
    except PipelineStageError as exc:
        report.update(status="failed", partial=True,
                      error={"stage": exc.stage, "iteration": exc.iteration, "message": str(exc.cause)})
        _write_report(out_dir, report)
        raise
    except SparsekitError as exc:
        report.update(status="failed", partial=True,
                      error={"stage": stage, "iteration": iteration, "message": str(exc)})
        _write_report(out_dir, report)
        raise PipelineStageError(stage, iteration, exc) from exc

    zeros, total = count_zeros(est.model_)
    final = {
        "achieved_sparsity": est.sparsity_,
        "model_zero_fraction": zeros / total if total else 0.0,
        "zero_weights": zeros,
        "total_weights": total,
        "iterations_run": len(est.history_),
    }
    if X_eval is not None:
        final["dense_accuracy"] = est.dense_accuracy_
        final["accuracy"] = topk_accuracy(predict_logits(est.model_, X_eval), y_eval, 1)
        if est.quantized_model_ is not None:
            final["quantized_accuracy"] = topk_accuracy(predict_logits(est.quantized_model_, X_eval), y_eval, 1)
    report.update(
        status="ok",
        stopped_early=est.stopped_early_,
        iterations=est.history_,
        final=final,
    )
    save_bundle(est.model_, out_dir / "sparse")
    report["artifacts"]["sparse_model"] = "sparse"
    mask_dir = out_dir / "masks"
    mask_dir.mkdir(parents=True, exist_ok=True)
    for name, mask in est.masks_.items():
        write_tensor(mask_dir / f"{name}.spkt", mask)
    report["artifacts"]["masks"] = "masks"
    if est.quantized_model_ is not None:
        save_bundle(est.quantized_model_, out_dir / "quantized")
        report["artifacts"]["quantized_model"] = "quantized"
    report["timings"].update({k: v for k, v in est.timings_.items()})
    report["timings"]["total"] = time.perf_counter() - started
    _write_report(out_dir, report)
    return est.final_model_, report


# --------------------------------------------------------------------------
# ablations


def _synthetic(kind):
    return {"calibration": {"source": kind, "path": None, "split": None}}


# Named variant lists for ``ablation_compare``; each entry is a config delta.
ABLATION_PRESETS = {
    "correction": [
        {"name": "mask only", "weight_correction": False, "activation_bias_correction": False,
         "finetune": False},
        {"name": "+bias correction", "weight_correction": False, "finetune": False},
        {"name": "+bias correction +finetune", "weight_correction": False},
        {"name": "+weight correction", "weight_correction": True},
    ],
    "data-source": [
        {"name": "real data"},
        {"name": "fractal_colored", **_synthetic("fractal_colored")},
        {"name": "fractal_gray", **_synthetic("fractal_gray")},
        {"name": "white_noise", **_synthetic("white_noise")},
    ],
    "criterion": [
        {"name": c.value, "criterion": c.value} for c in ImportanceCriterion
    ],
    "weight-decay": [
        {"name": "weight decay 0", "tune.weight_decay": 0.0},
        {"name": "weight decay 1e-6", "tune.weight_decay": 1e-6},
        {"name": "weight decay 1e-5", "tune.weight_decay": 1e-5},
    ],
}


def _variant_name(i, variant):
    if "name" in variant:
        return str(variant["name"])
    parts = [f"{k}={v}" for k, v in variant.items()]
    return ",".join(parts) or f"variant{i}"


def ablation_compare(cfg, variants, out_dir=None):
    """Run one pipeline per variant (config deltas) and tabulate the outcomes.

    Returns ``(rows, text)``; failed variants appear with ``status`` set to
    the error message and no metrics.
    """
    out_dir = Path(out_dir or cfg.out_dir)
    rows = []
    for i, variant in enumerate(variants):
        name = _variant_name(i, variant)
        deltas = {k: v for k, v in variant.items() if k != "name"}
        row = {"variant": name, "deltas": deltas}
        try:
            vcfg = cfg.with_overrides(deltas)
            vcfg.out_dir = str(out_dir / f"{i:02d}")
            _, report = run_pipeline(vcfg)
            final = report["final"]
            row.update(
                status="ok",
                sparsity=final["achieved_sparsity"],
                accuracy=final.get("quantized_accuracy", final.get("accuracy")),
                float_accuracy=final.get("accuracy"),
                dense_accuracy=final.get("dense_accuracy"),
            )
        except SparsekitError as exc:
            log.warning("variant %s failed: %s", name, exc)
            row.update(status=f"failed: {exc}", sparsity=None, accuracy=None)
        rows.append(row)
    text = format_table(rows)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "ablation.json").write_text(json.dumps(rows, indent=2) + "\n", encoding="utf-8")
    (out_dir / "ablation.txt").write_text(text + "\n", encoding="utf-8")
    return rows, text


def format_table(rows):
    def fmt(v, pct=True):
        if v is None:
            return "-"
        return f"{100 * v:.2f}" if pct else str(v)

    header = ("variant", "sparsity %", "top-1 %", "status")
    body = [(r["variant"], fmt(r.get("sparsity")), fmt(r.get("accuracy")), r["status"]) for r in rows]
    widths = [max(len(str(x)) for x in col) for col in zip(header, *body)]
    lines = ["  ".join(str(x).ljust(w) for x, w in zip(line, widths)) for line in (header, *body)]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


__all__ = [
    "ABLATION_PRESETS", "CalibrationSource", "PipelineConfig", "run_pipeline", "evaluate_topk", "ablation_compare",
    "calibration_pool", "load_eval", "strip_timings",
]
