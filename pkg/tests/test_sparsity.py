import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sparsekit.model import Model
from sparsekit.sparsity import (
    ImportanceCriterion,
    ScheduleConfig,
    apply_masks,
    enforce_superset,
    importance_scores,
    layer_importance,
    layer_sparsity,
    mask_sparsity,
    prune_count,
    schedule_sparsity,
    select_global_masks,
)
from sparsekit.tensor import LayerSpec


def two_layer_model():
    return Model([
        LayerSpec("fully_connected", "a", [[3.0, -4.0]]),
        LayerSpec("fully_connected", "b", [[1.0], [0.5], [0.2], [2.0]]),
    ], (2,))


def test_schedule_values():
    cfg = ScheduleConfig(0.1, 0.5, 10)
    assert schedule_sparsity(0, cfg) == 0.1
    assert schedule_sparsity(10, cfg) == 0.5
    assert abs(schedule_sparsity(5, cfg) - 0.45) < 1e-12
    with pytest.raises(ValueError):
        schedule_sparsity(11, cfg)


def test_schedule_config_validation():
    for bad in [(0.6, 0.5, 10), (0.1, 1.5, 10), (0.1, 0.5, 0), (-0.1, 0.5, 3), (0.1, 0.5, 2.5)]:
        with pytest.raises(ValueError):
            ScheduleConfig(*bad)


@given(s_i=st.floats(0, 0.99), d=st.floats(0, 1), T=st.integers(1, 60))
def test_schedule_monotone_and_bounded(s_i, d, T):
    s_f = s_i + d * (1 - s_i)
    cfg = ScheduleConfig(s_i, s_f, T)
    values = [schedule_sparsity(t, cfg) for t in range(T + 1)]
    assert values[0] == s_i and values[-1] == s_f
    assert all(b >= a - 1e-15 for a, b in zip(values, values[1:]))
    assert all(s_i - 1e-15 <= v <= s_f + 1e-15 for v in values)


def test_l2_normalized_example():
    np.testing.assert_allclose(layer_importance(np.array([3.0, -4.0]), "l2_normalized_magnitude"),
                               [0.6, 0.8], rtol=1e-9)


def test_global_mask_example():
    model = two_layer_model()
    scores = importance_scores(model, ImportanceCriterion.L2_NORMALIZED_MAGNITUDE)
    np.testing.assert_allclose(scores["b"].ravel(), [0.435, 0.217, 0.087, 0.870], atol=1e-3)
    masks = select_global_masks(scores, 0.5)
    np.testing.assert_array_equal(masks["a"], [[1, 1]])
    np.testing.assert_array_equal(masks["b"].ravel(), [0, 0, 0, 1])
    pruned = apply_masks(model, masks)
    np.testing.assert_array_equal(pruned.layer("a").weights, [[3, -4]])
    np.testing.assert_array_equal(pruned.layer("b").weights.ravel(), [0, 0, 0, 2])
    assert mask_sparsity(masks) == 0.5
    assert layer_sparsity(masks) == {"a": 0.0, "b": 0.75}


def lamp_oracle(w):
    """O(n^2) LAMP: w_u^2 / sum over v with |w_v| >= |w_u| of w_v^2."""
    flat = np.abs(w.ravel().astype(np.float64))
    out = np.empty_like(flat)
    for u, m in enumerate(flat):
        denom = np.sum(flat[flat >= m] ** 2)
        out[u] = m * m / denom if denom > 0 else 0.0
    return out.reshape(w.shape)


@given(arrays(np.float64, st.integers(1, 40),
              elements=st.sampled_from([0.0, 0.5, -0.5, 1.0, -2.0, 3.0]) | st.floats(-5, 5)))
def test_lamp_matches_oracle(w):
    np.testing.assert_allclose(layer_importance(w, "lamp"), lamp_oracle(w), rtol=1e-12, atol=1e-15)


def test_lamp_largest_weight_scores_one(rng):
    w = rng.normal(size=(4, 5))
    s = layer_importance(w, "lamp")
    assert s.flat[np.argmax(np.abs(w))] == pytest.approx(1.0)
    assert np.all((s >= 0) & (s <= 1))


@given(arrays(np.float64, st.integers(2, 30), elements=st.floats(-10, 10)),
       st.floats(0.01, 100))
def test_l2_and_lamp_are_scale_invariant(w, c):
    # the 1e-9 norm guard perturbs l2 scores by about 1e-9 / ||w||
    assume(np.linalg.norm(w) * min(c, 1.0) > 1e-2)
    for crit in ("l2_normalized_magnitude", "lamp"):
        np.testing.assert_allclose(layer_importance(c * w, crit), layer_importance(w, crit),
                                   rtol=1e-6, atol=1e-12)


@given(st.floats(0, 1), st.integers(0, 10_000))
def test_prune_count_bounds(s, n):
    k = prune_count(s, n)
    assert 0 <= k <= n
    assert k == min(n, int(np.floor(s * n + 1e-9)))


def test_prune_count_decimal_targets():
    assert prune_count(0.29, 100) == 29
    assert prune_count(0.5, 7) == 3
    assert prune_count(1.0, 5) == 5


@given(st.lists(arrays(np.float64, st.integers(1, 12), elements=st.integers(0, 3).map(float)),
                min_size=1, max_size=4),
       st.floats(0, 1))
def test_masks_match_sorted_oracle_with_ties(layers, s):
    scores = {f"l{i}": a for i, a in enumerate(layers)}
    masks = select_global_masks(scores, s)
    pooled = [(v, i, j) for i, a in enumerate(layers) for j, v in enumerate(a)]
    k = prune_count(s, len(pooled))
    pruned = {(i, j) for _, i, j in sorted(pooled)[:k]}
    for i, a in enumerate(layers):
        expected = [0.0 if (i, j) in pruned else 1.0 for j in range(len(a))]
        np.testing.assert_array_equal(masks[f"l{i}"], expected)


def test_masks_are_binary_float32(rng):
    masks = select_global_masks({"a": rng.random((3, 4)), "b": rng.random(5)}, 0.3)
    for m in masks.values():
        assert m.dtype == np.float32 and set(np.unique(m)) <= {0.0, 1.0}
    with pytest.raises(ValueError):
        select_global_masks({"a": rng.random(3)}, 1.5)


def test_exclude_layers_never_pruned():
    model = two_layer_model()
    scores = importance_scores(model, "magnitude", exclude=["a"])
    assert list(scores) == ["b"]
    masks = select_global_masks(scores, 1.0)
    pruned = apply_masks(model, masks)
    np.testing.assert_array_equal(pruned.layer("a").weights, [[3, -4]])


def test_apply_masks_writes_positive_zero():
    model = Model([LayerSpec("fully_connected", "f", [[-1.0, -2.0]])], (2,))
    out = apply_masks(model, {"f": np.array([[0.0, 1.0]])})
    assert out.layer("f").weights.tobytes()[:4] == b"\x00\x00\x00\x00"
    assert model.layer("f").weights[0, 0] == -1.0


def test_enforce_superset():
    new = {"a": np.array([1.0, 1.0, 0.0])}
    old = {"a": np.array([0.0, 1.0, 1.0])}
    np.testing.assert_array_equal(enforce_superset(new, old)["a"], [0, 1, 0])
