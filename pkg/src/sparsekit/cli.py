"""Command line entry point: ``sparsekit <command> [options]``.

Exit codes: 0 success, 1 other toolkit error, 2 usage error, 3 bad
configuration, 4 bad or missing data / model files, 5 numeric failure.
"""

import json
import logging
import sys
from pathlib import Path

import click

from . import __version__
from .assets import resolve_path
from .exceptions import (
    BundleError,
    ConfigError,
    DataError,
    GenerationError,
    NumericError,
    PipelineStageError,
    SparsekitError,
    StructureError,
    UnsupportedLayerError,
)
from .model import fuse_batchnorm, load_bundle, save_bundle
from .pipeline import (
    ABLATION_PRESETS,
    CalibrationSource,
    PipelineConfig,
    ablation_compare,
    calibration_pool,
    evaluate_topk,
    run_pipeline,
)
from .quantization import quantize_model
from .syndata import KINDS, generate_dataset

EXIT_OTHER = 1
EXIT_CONFIG = 3
EXIT_DATA = 4
EXIT_NUMERIC = 5

log = logging.getLogger("sparsekit")


def exit_code(exc):
    if isinstance(exc, PipelineStageError):
        return exit_code(exc.cause)
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, NumericError):
        return EXIT_NUMERIC
    if isinstance(exc, (DataError, BundleError, GenerationError, StructureError, UnsupportedLayerError)):
        return EXIT_DATA
    return EXIT_OTHER


def _run(fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except SparsekitError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(exit_code(exc))
    except OSError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_DATA)


def _write_json(out_dir, name, payload):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / name).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _load_model(path):
    return load_bundle(resolve_path(path))


def _load_config(path, seed, out_dir):
    cfg = PipelineConfig.from_file(path)
    if seed is not None:
        cfg.seed = seed
    if out_dir is not None:
        cfg.out_dir = str(out_dir)
    return cfg


def seed_option(f):
    return click.option("--seed", type=int, default=None, help="Root random seed.")(f)


def out_dir_option(required=False):
    return click.option("--out-dir", type=click.Path(file_okay=False, path_type=Path),
                        required=required, default=None, help="Output directory.")


@click.group()
@click.version_option(__version__)
@click.option("-v", "--verbose", count=True, help="More logging (-vv for debug).")
def main(verbose):
    """Post-training unstructured pruning toolkit."""
    level = logging.WARNING if verbose == 0 else logging.INFO if verbose == 1 else logging.DEBUG
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(exists=True, dir_okay=False))
@seed_option
@out_dir_option()
def prune(config_path, seed, out_dir):
    """Run the full prune / correct / fine-tune pipeline described by a JSON config."""
    cfg = _run(_load_config, config_path, seed, out_dir)
    _, report = _run(run_pipeline, cfg)
    final = report["final"]
    msg = f"sparsity {final['achieved_sparsity']:.4f} after {final['iterations_run']} iterations"
    if "accuracy" in final:
        msg += f", top-1 {final['accuracy']:.4f} (dense {final['dense_accuracy']:.4f})"
    if "quantized_accuracy" in final:
        msg += f", int8 {final['quantized_accuracy']:.4f}"
    click.echo(msg)
    click.echo(f"report: {Path(cfg.out_dir) / 'report.json'}")


@main.command("fuse-bn")
@click.option("--model", "model_path", required=True, help="Model bundle directory (or builtin:<name>).")
@out_dir_option(required=True)
def fuse_bn(model_path, out_dir):
    """Fold batchnorm layers into the preceding conv / fully connected layers."""
    model = _run(_load_model, model_path)
    fused = _run(fuse_batchnorm, model)
    _run(save_bundle, fused, out_dir)
    click.echo(f"{len(model.layers) - len(fused.layers)} batchnorm layer(s) folded; wrote {out_dir}")


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False),
              help="Pipeline config; its model, calibration and pool_size are used.")
@click.option("--model", "model_path", help="Model bundle (overrides the config).")
@click.option("--calib-dir", help="Calibration image / tensor directory.")
@click.option("--calib-source", type=click.Choice(KINDS), help="Synthetic calibration data instead.")
@click.option("--pool-size", type=int, default=None)
@seed_option
@out_dir_option(required=True)
def quantize(config_path, model_path, calib_dir, calib_source, pool_size, seed, out_dir):
    """Fake-quantize a (pruned) model to symmetric int8."""
    def build():
        if config_path:
            cfg = _load_config(config_path, seed, out_dir)
        else:
            if not model_path or not (calib_dir or calib_source):
                raise ConfigError("give --config, or --model with --calib-dir / --calib-source")
            cfg = PipelineConfig(model=model_path, calibration=CalibrationSource(
                "directory" if calib_dir else calib_source, calib_dir), seed=seed or 0)
        if model_path:
            cfg.model = model_path
        if pool_size is not None:
            cfg.pool_size = pool_size
        return cfg.validate()

    cfg = _run(build)
    model = _run(_load_model, cfg.model)
    pool = _run(calibration_pool, cfg, model)
    quantized = _run(quantize_model, model, pool)
    _run(save_bundle, quantized, out_dir)
    report = {"model": str(cfg.model), "pool_size": len(pool),
              "activation_scales": quantized.metadata["activation_scales"]}
    if cfg.eval_dataset:
        report["accuracy"] = _run(evaluate_topk, quantized, cfg.eval_dataset, 1, cfg.eval_split)
        report["float_accuracy"] = _run(evaluate_topk, model, cfg.eval_dataset, 1, cfg.eval_split)
    _write_json(out_dir, "report.json", report)
    click.echo(f"wrote {out_dir}")


@main.command("generate-data")
@click.option("--kind", type=click.Choice(KINDS), default="fractal_colored", show_default=True)
@click.option("--count", type=int, default=100, show_default=True)
@click.option("--size", type=int, default=512, show_default=True)
@click.option("--n-points", type=int, default=100_000, show_default=True)
@seed_option
@out_dir_option(required=True)
def generate_data(kind, count, size, n_points, seed, out_dir):
    """Write synthetic calibration images (PPM/PGM) plus manifest.json."""
    manifest = _run(generate_dataset, kind, count, size, seed or 0, out_dir, n_points)
    click.echo(f"{len(manifest['images'])} {kind} images in {out_dir}")


@main.command()
@click.option("--model", "model_path", required=True, help="Model bundle directory (or builtin:<name>).")
@click.option("--dataset", required=True, help="Dataset directory or dataset.json (or builtin:<name>).")
@click.option("--split", default=None)
@click.option("-k", "--top-k", "top_k", type=int, multiple=True, default=(1, 5), show_default=True)
@out_dir_option()
def evaluate(model_path, dataset, split, top_k, out_dir):
    """Top-k accuracy of a model bundle on a labeled dataset."""
    model = _run(_load_model, model_path)
    result = {f"top{k}": _run(evaluate_topk, model, dataset, k, split) for k in top_k}
    for name, acc in result.items():
        click.echo(f"{name}: {acc:.4f}")
    if out_dir is not None:
        _write_json(out_dir, "report.json", {"model": str(model_path), "dataset": dataset,
                                             "split": split, **result})


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--preset", type=click.Choice(sorted(ABLATION_PRESETS)), help="Built-in variant list.")
@click.option("--variants", "variants_path", type=click.Path(exists=True, dir_okay=False),
              help="JSON list of config deltas (optionally with a 'name').")
@seed_option
@out_dir_option()
def ablate(config_path, preset, variants_path, seed, out_dir):
    """Run the pipeline once per variant and print a comparison table."""
    cfg = _run(_load_config, config_path, seed, out_dir)

    def variants():
        if bool(preset) == bool(variants_path):
            raise ConfigError("give exactly one of --preset or --variants")
        if preset:
            return ABLATION_PRESETS[preset]
        try:
            raw = json.loads(Path(variants_path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"cannot parse {variants_path}: {exc}") from exc
        if not isinstance(raw, list) or not all(isinstance(v, dict) for v in raw):
            raise ConfigError("variants file must hold a JSON list of objects")
        return raw

    rows, text = _run(ablation_compare, cfg, _run(variants), cfg.out_dir)
    click.echo(text)
    if any(r["status"] != "ok" for r in rows):
        sys.exit(EXIT_OTHER)


if __name__ == "__main__":
    main()
