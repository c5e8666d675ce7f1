"""Acceptance criteria 1-14.

Each test carries ``@pytest.mark.criterion(n, title)``; the terminal summary
prints one PASS/FAIL line per criterion. Run directly with
``python3 tests/test_acceptance.py`` or as part of ``pytest``.

Desk-scale pipeline runs use seed 0 throughout and are cached per config so
variants shared between criteria execute once.
"""

import json
import math
import shutil
import struct
import sys
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest
from click.testing import CliRunner

from conftest import random_conv_chain
from test_tensor import finite_difference_check
from sparsekit.assets import resolve_path
from sparsekit.cli import main as cli_main
from sparsekit.correction import (
    capture_dense_inputs,
    channel_stats,
    correct_activation_bias,
    correct_weight_statistics,
    mean_output_residual,
    rescale_channels,
)
from sparsekit.model import fuse_batchnorm, load_bundle, read_tensor
from sparsekit.pipeline import ABLATION_PRESETS, PipelineConfig, evaluate_topk, run_pipeline, strip_timings
from sparsekit.quantization import fake_quantize, quantize_codes, weight_qparams
from sparsekit.sparsity import (
    ImportanceCriterion,
    ScheduleConfig,
    apply_masks,
    importance_scores,
    schedule_sparsity,
    select_global_masks,
)
from sparsekit.syndata import fill_rate, generate_dataset, read_image, white_noise_bytes

CONFIGS = Path(__file__).resolve().parent.parent / "configs"
TOLERANCE = 0.005  # half a percentage point


def criterion(number, title):
    return pytest.mark.criterion(number, title)


def pct(x):
    return f"{100 * x:.1f}"


# --------------------------------------------------------------------------
# cached desk-scale runs


@pytest.fixture(scope="module")
def desk_run(tmp_path_factory):
    """``desk_run(deltas) -> report``; float-only runs of the desk config at 50%."""
    base = PipelineConfig.from_file(CONFIGS / "desk_prune.json").with_overrides({"quantize": False, "seed": 0})
    root = tmp_path_factory.mktemp("desk_runs")
    cache = {}

    def run(deltas):
        key = json.dumps(deltas, sort_keys=True)
        if key not in cache:
            cfg = base.with_overrides(deltas)
            cfg.out_dir = str(root / f"run{len(cache):02d}")
            _, cache[key] = run_pipeline(cfg)
        return cache[key]
    return run


def preset(name, label):
    (variant,) = [v for v in ABLATION_PRESETS[name] if v["name"] == label]
    return {k: v for k, v in variant.items() if k != "name"}


def accuracy(desk_run, name, label):
    return desk_run(preset(name, label))["final"]["accuracy"]


@pytest.fixture(scope="module")
def cli_runs(tmp_path_factory):
    """Two ``sparsekit prune`` runs of the shipped desk config into the same out dir."""
    root = tmp_path_factory.mktemp("cli")
    out = root / "out"
    runner = CliRunner()
    args = ["prune", "--config", str(CONFIGS / "desk_prune.json"), "--seed", "0", "--out-dir", str(out)]
    first = runner.invoke(cli_main, args)
    assert first.exit_code == 0, first.output
    shutil.copytree(out, root / "first")
    second = runner.invoke(cli_main, args)
    assert second.exit_code == 0, second.output
    return root / "first", out


# --------------------------------------------------------------------------


@criterion(1, "schedule exactness")
def test_schedule_exactness(record_property):
    cfg = ScheduleConfig(0.1, 0.5, 10)
    assert schedule_sparsity(0, cfg) == 0.1
    assert schedule_sparsity(10, cfg) == 0.5
    mid = schedule_sparsity(5, cfg)
    assert abs(mid - 0.45) <= 1e-12
    rng = np.random.default_rng(0)
    for _ in range(200):
        s_i, s_f = sorted(rng.uniform(0, 0.99, 2))
        T = int(rng.integers(1, 50))
        cfg = ScheduleConfig(float(s_i), float(s_f), T)
        assert schedule_sparsity(0, cfg) == cfg.s_i and schedule_sparsity(T, cfg) == cfg.s_f
    record_property("detail", f"s(5)={mid!r}")


def oracle_masks(layers, s):
    n = sum(a.size for a in layers)
    k = math.floor(Fraction(str(s)) * n)
    ranked = sorted((v, i, j) for i, a in enumerate(layers) for j, v in enumerate(a.ravel()))
    keep = [np.ones(a.size, dtype=np.float32) for a in layers]
    for _, i, j in ranked[:k]:
        keep[i][j] = 0.0
    return [m.reshape(a.shape) for m, a in zip(keep, layers)], k


@criterion(2, "threshold exactness")
def test_threshold_exactness(record_property):
    rng = np.random.default_rng(0)
    for trial in range(1000):
        layers = []
        for _ in range(int(rng.integers(1, 5))):
            shape = tuple(int(d) for d in rng.integers(1, 8, size=int(rng.integers(1, 4))))
            if trial % 2:
                layers.append(rng.integers(0, 5, size=shape).astype(np.float64))  # heavy ties
            else:
                layers.append(np.abs(rng.normal(size=shape)))
        s = round(float(rng.uniform(0, 1)), 3)
        masks = select_global_masks({f"l{i}": a for i, a in enumerate(layers)}, s)
        expected, k = oracle_masks(layers, s)
        assert sum(int(m.size - np.count_nonzero(m)) for m in masks.values()) == k
        for i, want in enumerate(expected):
            assert masks[f"l{i}"].tobytes() == want.tobytes()
    record_property("detail", "1000 score sets")


@criterion(3, "gradient correctness")
def test_gradient_correctness(record_property):
    rng = np.random.default_rng(2024)
    errors = [finite_difference_check(kind, rng) for kind in ("conv2d", "fully_connected") for _ in range(25)]
    assert len(errors) >= 50
    assert max(errors) < 1e-3
    record_property("detail", f"{len(errors)} instances, max rel err {max(errors):.1e}")


@criterion(4, "correction identity")
def test_correction_identity(record_property):
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(50):
        shape = (int(rng.integers(1, 9)), int(rng.integers(1, 5)), 3, 3) if rng.random() < 0.5 \
            else (int(rng.integers(1, 9)), int(rng.integers(2, 40)))
        dense = rng.normal(rng.normal(), rng.uniform(0.05, 3), size=shape).astype(np.float32)
        out = correct_weight_statistics(dense, dense, np.ones_like(dense))
        assert np.max(np.abs(out - dense)) <= 1e-6 * max(1.0, np.max(np.abs(dense)))
        mask = (rng.random(shape) < rng.uniform(0.2, 0.9)).astype(np.float32)
        mask.reshape(shape[0], -1)[:, :2] = 1.0  # at least two survivors per channel
        pre = rescale_channels(dense, dense * mask)
        got, want = channel_stats(pre), channel_stats(dense)
        rel_std = np.max(np.abs(got.std - want.std) / want.std)
        rel_mean = np.max(np.abs(got.mean - want.mean) / np.maximum(np.abs(want.mean), want.std))
        worst = max(worst, rel_std, rel_mean)
    assert worst <= 1e-5
    record_property("detail", f"max rel stat err {worst:.1e}")


@criterion(5, "activation bias correction")
def test_activation_bias_correction(record_property):
    rng = np.random.default_rng(5)
    worst = 0.0
    for bias in (True, False):
        dense = random_conv_chain(rng, bias=bias)
        masks = select_global_masks(importance_scores(dense), 0.5)
        assert len(masks) == 4
        calib = rng.normal(size=(32,) + dense.input_shape).astype(np.float32)
        corrected = correct_activation_bias(dense, apply_masks(dense, masks), calib)
        inputs = capture_dense_inputs(dense, calib, list(masks))
        for name in masks:
            res = mean_output_residual(dense.layer(name), corrected.layer(name), inputs[name])
            worst = max(worst, float(np.max(np.abs(res))))
    assert worst < 1e-5
    record_property("detail", f"max residual {worst:.1e}")


def raw_float_words(path):
    """The float32 payload of a tensor file as 4-byte words, parsed without the toolkit."""
    raw = Path(path).read_bytes()
    assert raw[:8] == b"SPKTENS0"
    (rank,) = struct.unpack_from("<I", raw, 8)
    shape = struct.unpack_from(f"<{rank}I", raw, 12)
    payload = raw[12 + 4 * rank:]
    return [payload[i:i + 4] for i in range(0, len(payload), 4)], shape


@criterion(6, "mask persistence")
def test_mask_persistence(cli_runs, record_property):
    out, _ = cli_runs
    report = json.loads((out / "report.json").read_text())
    manifest = json.loads((out / "sparse" / "manifest.json").read_text())
    scanned = zero = 0
    for entry in manifest["layers"]:
        if "weights" not in entry:
            continue
        words, shape = raw_float_words(out / "sparse" / entry["weights"])
        mask = read_tensor(out / "masks" / f"{entry['name']}.spkt")
        assert tuple(mask.shape) == tuple(shape)
        for word, keep in zip(words, mask.ravel()):
            if keep == 0:
                assert word == b"\x00\x00\x00\x00"
                scanned += 1
            zero += word == b"\x00\x00\x00\x00"
    total = report["final"]["total_weights"]
    assert abs(scanned / total - 0.5) <= 1 / total
    assert zero == report["final"]["zero_weights"]
    record_property("detail", f"{scanned} masked weights of {total} all 0x00000000")


@criterion(7, "correction ablation ordering")
def test_correction_ablation_ordering(desk_run, record_property):
    mask_only = accuracy(desk_run, "correction", "mask only")
    bias = accuracy(desk_run, "correction", "+bias correction")
    tuned = accuracy(desk_run, "correction", "+bias correction +finetune")
    record_property("detail", f"{pct(mask_only)} / {pct(bias)} / {pct(tuned)}")
    assert mask_only <= bias + TOLERANCE
    assert bias <= tuned + TOLERANCE


def test_weight_correction_ordering_example(desk_run):
    # mask only <= +activation bias correction <= +weight correction, 0.5 pt tolerance
    mask_only = accuracy(desk_run, "correction", "mask only")
    bias = accuracy(desk_run, "correction", "+bias correction")
    full = accuracy(desk_run, "correction", "+weight correction")
    assert mask_only <= bias + TOLERANCE
    assert bias <= full + TOLERANCE, f"{pct(mask_only)} / {pct(bias)} / {pct(full)}"


@criterion(8, "bn fusing criterion effect")
def test_bn_fusing_criterion_effect(record_property):
    fused = fuse_batchnorm(load_bundle(resolve_path("builtin:desk_cnn_bn")))
    assert all(layer.kind != "batchnorm" for layer in fused.layers)

    def masks(model, criterion):
        return select_global_masks(importance_scores(model, criterion), 0.5)

    def same(a, b):
        return all(np.array_equal(a[n], b[n]) for n in a)

    mag = masks(fused, ImportanceCriterion.MAGNITUDE)
    l2 = masks(fused, ImportanceCriterion.L2_NORMALIZED_MAGNITUDE)
    assert not same(mag, l2)
    scaled = fused.copy()
    scaled.layer("conv2").weights = (scaled.layer("conv2").weights * 4.0).astype(np.float32)
    mag_scaled = masks(scaled, ImportanceCriterion.MAGNITUDE)
    l2_scaled = masks(scaled, ImportanceCriterion.L2_NORMALIZED_MAGNITUDE)
    assert not same(mag, mag_scaled)
    assert same(l2, l2_scaled)
    flips = sum(int(np.sum(mag[n] != l2[n])) for n in mag)
    record_property("detail", f"magnitude vs l2 masks differ in {flips} positions")


@criterion(9, "data-source ordering")
def test_data_source_ordering(desk_run, record_property):
    real = accuracy(desk_run, "data-source", "real data")
    colored = accuracy(desk_run, "data-source", "fractal_colored")
    noise = accuracy(desk_run, "data-source", "white_noise")
    record_property("detail", f"{pct(real)} / {pct(colored)} / {pct(noise)}")
    assert real + TOLERANCE >= colored
    assert colored + TOLERANCE >= noise


@criterion(10, "colorization benefit")
def test_colorization_benefit(desk_run, record_property):
    colored = accuracy(desk_run, "data-source", "fractal_colored")
    gray = accuracy(desk_run, "data-source", "fractal_gray")
    record_property("detail", f"colored {pct(colored)} vs gray {pct(gray)}")
    assert colored >= gray - TOLERANCE


@criterion(11, "quantization bounds")
def test_quantization_bounds(cli_runs, record_property):
    out, _ = cli_runs
    rng = np.random.default_rng(11)
    for _ in range(200):
        w = (rng.normal(size=(int(rng.integers(1, 8)), int(rng.integers(1, 30))))
             * rng.uniform(1e-3, 1e3)).astype(np.float32)
        q = weight_qparams(w)
        _, scale = quantize_codes(w, q)
        err = np.abs(w.astype(np.float64) - fake_quantize(w, q).astype(np.float64))
        # scale/2 plus float32 rounding of the stored dequantized value
        assert np.all(err <= scale / 2 + np.abs(w) * 2.0 ** -24)
    sparse = load_bundle(out / "sparse")
    quant = load_bundle(out / "quantized")
    for a, b in zip(sparse.prunable_layers(), quant.prunable_layers()):
        assert np.array_equal(a.weights == 0, b.weights == 0)
    float_acc = evaluate_topk(sparse, "builtin:desk_digits", 1, split="val")
    int8_acc = evaluate_topk(quant, "builtin:desk_digits", 1, split="val")
    record_property("detail", f"float {pct(float_acc)} vs int8 {pct(int8_acc)}")
    assert abs(float_acc - int8_acc) <= 0.02


@criterion(12, "weight decay harm direction")
def test_weight_decay_direction(desk_run, record_property):
    plain = accuracy(desk_run, "weight-decay", "weight decay 0")
    decayed = accuracy(desk_run, "weight-decay", "weight decay 1e-5")
    record_property("detail", f"wd 0 {pct(plain)} vs wd 1e-5 {pct(decayed)}")
    assert decayed <= plain


@criterion(13, "determinism")
def test_determinism(cli_runs, record_property):
    first, second = cli_runs
    files = sorted(p.relative_to(first) for p in first.rglob("*") if p.is_file())
    assert files == sorted(p.relative_to(second) for p in second.rglob("*") if p.is_file())
    for rel in files:
        if rel.name == "report.json":
            continue
        assert (first / rel).read_bytes() == (second / rel).read_bytes(), rel
    a = json.loads((first / "report.json").read_text())
    b = json.loads((second / "report.json").read_text())
    assert json.dumps(strip_timings(a), sort_keys=True) == json.dumps(strip_timings(b), sort_keys=True)
    record_property("detail", f"{len(files)} files identical")


@criterion(14, "synthetic data contracts")
def test_synthetic_data_contracts(tmp_path, record_property):
    a = generate_dataset("fractal_gray", 12, 512, seed=0, out_dir=tmp_path / "a", n_points=100_000)
    b = generate_dataset("fractal_gray", 12, 512, seed=0, out_dir=tmp_path / "b", n_points=100_000)
    rates = []
    for entry in a["images"]:
        rate = fill_rate(read_image(tmp_path / "a" / entry["file"]))
        assert 0.05 <= rate <= 0.4
        rates.append(rate)
    colored = generate_dataset("fractal_colored", 12, 512, seed=1, out_dir=tmp_path / "c", n_points=100_000)
    assert all(0.05 <= e["fill_rate"] <= 0.4 for e in colored["images"])
    assert a == b
    for path in sorted((tmp_path / "a").iterdir()):
        assert path.read_bytes() == (tmp_path / "b" / path.name).read_bytes()
    means = [float(white_noise_bytes(3, 512, 512, seed=s).mean()) for s in range(5)]
    assert all(124 <= m <= 131 for m in means)
    assert white_noise_bytes(3, 512, 512, 0).tobytes() == white_noise_bytes(3, 512, 512, 0).tobytes()
    record_property("detail", f"fill {min(rates):.3f}..{max(rates):.3f}, noise mean {means[0]:.2f}")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v", "-p", "no:cacheprovider"]))
