import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import random_conv_chain
from sparsekit.exceptions import ConfigError, DimensionError
from sparsekit.model import count_zeros, forward, forward_with_capture
from sparsekit.quantization import (
    QMAX,
    QuantParams,
    activation_qparams,
    fake_quantize,
    quantize_codes,
    quantize_model,
    weight_qparams,
)
from sparsekit.sparsity import apply_masks, importance_scores, select_global_masks


def test_weight_scale_examples():
    q = weight_qparams(np.array([[-1.0, 0.5], [0.0, 0.0]]))
    assert q.scales[0] == pytest.approx(1 / 127)
    assert q.scales[1] == 1e-9
    np.testing.assert_array_equal(fake_quantize(np.zeros((2, 2)), q), 0)
    with pytest.raises(DimensionError):
        weight_qparams(np.ones(3))


def test_round_half_even_example():
    out = fake_quantize(np.array(0.5), QuantParams(1 / 127))
    assert out == np.float32(64 / 127)
    assert out == pytest.approx(0.50394, abs=1e-5)
    codes, _ = quantize_codes(np.array([0.5, 1.5, 2.5, -0.5]), QuantParams(1.0))
    np.testing.assert_array_equal(codes, [0, 2, 2, -0])


def test_activation_scale_examples():
    cap = {"l": (np.array([[-2.0, 1.0, 2.0]]), None)}
    assert float(activation_qparams(cap, "l").scales) == pytest.approx(2 / 127)
    zero = {"l": (np.zeros((1, 3)), None)}
    assert float(activation_qparams(zero, "l").scales) == 1e-9
    small = {"l": (np.array([[0.5]]), None)}
    assert activation_qparams([cap, small], "l").scales == activation_qparams(cap, "l").scales
    with pytest.raises(ConfigError):
        activation_qparams([{}], "l")


def test_scale_equivariance(rng):
    w = rng.normal(size=(3, 8))
    q1, q2 = weight_qparams(w), weight_qparams(2 * w)
    np.testing.assert_allclose(q2.scales, 2 * q1.scales, rtol=1e-15)
    np.testing.assert_array_equal(quantize_codes(w, q1)[0], quantize_codes(2 * w, q2)[0])


@given(arrays(np.float32, (4, 6), elements=st.floats(-100, 100, width=32)))
def test_error_bound_and_code_range(w):
    q = weight_qparams(w)
    codes, scale = quantize_codes(w, q)
    assert np.all(np.abs(codes) <= QMAX)
    err = np.abs(w.astype(np.float64) - fake_quantize(w, q).astype(np.float64))
    # half a step, plus float32 rounding of the dequantized value
    assert np.all(err <= scale / 2 + 1e-6 * np.abs(w) + 1e-12)
    zeros = w == 0
    assert np.all(fake_quantize(w, q)[zeros] == 0)


@given(arrays(np.float64, 10, elements=st.floats(-10, 10)), st.floats(0.01, 1))
def test_out_of_range_clamps(t, scale):
    out = fake_quantize(t, QuantParams(scale))
    assert np.all(np.abs(out) <= np.float32(QMAX * scale) * (1 + 1e-6))


def test_quantize_model_preserves_sparsity_and_is_idempotent(rng):
    dense = random_conv_chain(rng)
    # tiny surviving weights would round to code 0 without the nonzero guard
    dense.layer("conv1").weights[0, 0, 0, 0] = 1e-6
    masks = select_global_masks(importance_scores(dense), 0.5)
    masks["conv1"][0, 0, 0, 0] = 1.0
    sparse = apply_masks(dense, masks)
    calib = rng.normal(size=(30,) + dense.input_shape).astype(np.float32)
    q = quantize_model(sparse, calib)
    assert count_zeros(q) == count_zeros(sparse)
    for name in masks:
        assert np.array_equal(q.layer(name).weights == 0, sparse.layer(name).weights == 0)
    assert set(q.activation_scales) == {layer.name for layer in dense.prunable_layers()}
    again = quantize_model(q, calib, activation_scales=q.activation_scales)
    for name in masks:
        np.testing.assert_array_equal(again.layer(name).weights, q.layer(name).weights)
    assert again.activation_scales == q.activation_scales


def test_quantized_forward_uses_activation_scales(rng):
    dense = random_conv_chain(rng)
    calib = rng.normal(size=(30,) + dense.input_shape).astype(np.float32)
    q = quantize_model(dense, calib)
    _, cap = forward_with_capture(q, calib, ["fc1"])
    scale = q.activation_scales["fc1"]
    codes = cap["fc1"][0].astype(np.float64) / scale
    np.testing.assert_allclose(codes, np.rint(codes), atol=1e-3)
    # quantized logits stay close to the float ones
    ref, got = forward(dense, calib), forward(q, calib)
    assert np.max(np.abs(ref - got)) < 0.05 * np.max(np.abs(ref))
