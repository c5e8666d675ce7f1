import json

import numpy as np
import pytest

from sparsekit.assets import asset_path, resolve_path
from sparsekit.data import (
    EvalDataset,
    PreprocessSpec,
    load_input_dir,
    preprocess_image,
    sample_pool,
)
from sparsekit.exceptions import DataError
from sparsekit.metrics import topk_accuracy
from sparsekit.model import write_tensor
from sparsekit.syndata import write_image


def brute_force_topk(logits, labels, k):
    hits = 0
    for row, y in zip(logits, labels):
        rank = sum(1 for c, v in enumerate(row) if v > row[y] or (v == row[y] and c < y))
        hits += rank < k
    return hits / len(labels)


def test_topk_matches_brute_force(rng):
    logits = rng.integers(0, 4, size=(200, 10)).astype(np.float32)  # plenty of ties
    labels = rng.integers(0, 10, size=200)
    for k in (1, 2, 5, 10):
        assert topk_accuracy(logits, labels, k) == brute_force_topk(logits, labels, k)


def test_topk_edge_cases():
    logits = np.tile([3.0, 1.0, 0.0], (4, 1))
    assert topk_accuracy(logits, np.zeros(4), 1) == 1.0
    assert topk_accuracy(np.random.default_rng(0).normal(size=(5, 3)), [0, 1, 2, 0, 1], 3) == 1.0
    with pytest.raises(DataError):
        topk_accuracy(logits, [0, 1, 5, 0], 1)
    with pytest.raises(DataError):
        topk_accuracy(np.zeros((0, 3)), [], 1)


def test_preprocess_resize_crop_normalize():
    img = np.linspace(0, 1, 3 * 8 * 12, dtype=np.float32).reshape(3, 8, 12)
    spec = PreprocessSpec(resize=4, crop=4, mean=(0.5, 0.5, 0.5), std=(0.25, 0.25, 0.25))
    out = preprocess_image(img, spec, channels=3)
    assert out.shape == (3, 4, 4)
    # box downsampling by 2 keeps the mean of the kept region
    np.testing.assert_allclose(out[0, 0, 0], (img[0, :2, 2:4].mean() - 0.5) / 0.25, rtol=1e-5)
    gray = preprocess_image(img[:1], PreprocessSpec(), channels=3)
    np.testing.assert_array_equal(gray[0], gray[2])
    with pytest.raises(DataError):
        preprocess_image(img, PreprocessSpec(crop=20))
    with pytest.raises(DataError):
        preprocess_image(img[:2], PreprocessSpec(), channels=3)


def test_dataset_manifest_and_tensor_index(tmp_path):
    write_tensor(tmp_path / "batch.spkt", np.arange(2 * 1 * 2 * 2, dtype=np.float32).reshape(2, 1, 2, 2))
    write_image(tmp_path / "a.pgm", np.full((1, 2, 2), 255, np.uint8))
    (tmp_path / "dataset.json").write_text(json.dumps({
        "num_classes": 3,
        "samples": [
            {"file": "batch.spkt", "index": 1, "label": 2, "split": "val"},
            {"file": "a.pgm", "label": 0, "split": "train"},
        ],
    }))
    ds = EvalDataset.from_manifest(tmp_path, split="val")
    X, y = ds.load()
    np.testing.assert_array_equal(X[0, 0], [[4, 5], [6, 7]])
    assert list(y) == [2]
    assert len(load_input_dir(tmp_path)) == 2
    with pytest.raises(DataError):
        EvalDataset.from_manifest(tmp_path / "missing")


def test_load_input_dir_without_manifest(tmp_path):
    with pytest.raises(DataError):
        load_input_dir(tmp_path)
    write_image(tmp_path / "x.ppm", np.zeros((3, 4, 4), np.uint8))
    write_tensor(tmp_path / "y.spkt", np.zeros((2, 3, 4, 4)))
    assert len(load_input_dir(tmp_path)) == 3


def test_sample_pool_without_replacement():
    items = list(range(50))
    pool = sample_pool(items, 20, seed=1)
    assert len(set(pool)) == 20
    assert pool == sample_pool(items, 20, seed=1)
    assert sorted(sample_pool(items, 80, seed=1)) == items


def test_builtin_assets():
    assert resolve_path("builtin:desk_cnn") == asset_path("desk_cnn")
    ds = EvalDataset.from_manifest(resolve_path("builtin:desk_digits"))
    assert len(ds) == 1000 and ds.num_classes == 10
    assert {s["split"] for s in ds.samples} == {"train", "val"}
