"""Sequential models, the on-disk bundle format and BatchNorm fusing.

A bundle is a directory holding ``manifest.json`` plus one binary file per
tensor. Tensor files are laid out as::

    b"SPKTENS0" | u32 rank | rank x u32 extents | float32 payload

with every integer and float little-endian and the payload row-major.
"""

from __future__ import annotations

import json
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import (
    BundleError,
    ByteCountError,
    DimensionError,
    DuplicateLayerError,
    MissingTensorError,
    StructureError,
    TensorFileError,
    UnsupportedLayerError,
)
from .tensor import (
    DEFAULT_BN_EPS,
    LAYER_KINDS,
    BatchNormParams,
    LayerSpec,
    as_tensor,
    layer_forward,
)

TENSOR_MAGIC = b"SPKTENS0"
MANIFEST_NAME = "manifest.json"
BUNDLE_FORMAT = "sparsekit-bundle"
BUNDLE_VERSION = 1


# --------------------------------------------------------------------------
# tensor files


def write_tensor(path, array):
    arr = np.asarray(array, dtype="<f4", order="C")
    header = TENSOR_MAGIC + struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(arr.tobytes(order="C"))


def read_tensor(path):
    path = Path(path)
    if not path.is_file():
        raise MissingTensorError(f"missing tensor file: {path}")
    raw = path.read_bytes()
    if raw[:8] != TENSOR_MAGIC:
        raise TensorFileError(f"{path.name}: bad magic {raw[:8]!r}")
    if len(raw) < 12:
        raise ByteCountError(f"{path.name}: truncated header")
    (rank,) = struct.unpack_from("<I", raw, 8)
    offset = 12 + 4 * rank
    if len(raw) < offset:
        raise ByteCountError(f"{path.name}: truncated header for rank {rank}")
    shape = struct.unpack_from(f"<{rank}I", raw, 12)
    expected = offset + 4 * int(np.prod(shape, dtype=np.int64))
    if len(raw) != expected:
        raise ByteCountError(
            f"{path.name}: expected {expected} bytes for shape {tuple(shape)}, found {len(raw)}"
        )
    data = np.frombuffer(raw, dtype="<f4", offset=offset).reshape(shape)
    return data.astype(np.float32)


# --------------------------------------------------------------------------
# model


def _output_shape(layer, shape):
    """Per-sample output shape of ``layer`` for a per-sample input ``shape``."""
    if layer.kind == "conv2d":
        if len(shape) != 3 or shape[0] != layer.weights.shape[1]:
            raise DimensionError(f"layer {layer.name!r} cannot consume shape {shape}")
        o, _, kh, kw = layer.weights.shape
        h = (shape[1] + 2 * layer.padding - kh) // layer.stride + 1
        w = (shape[2] + 2 * layer.padding - kw) // layer.stride + 1
        if h < 1 or w < 1:
            raise DimensionError(f"layer {layer.name!r}: kernel larger than padded input {shape}")
        return (o, h, w)
    if layer.kind == "fully_connected":
        if int(np.prod(shape)) != layer.weights.shape[1]:
            raise DimensionError(f"layer {layer.name!r} cannot consume shape {shape}")
        return (layer.weights.shape[0],)
    if layer.kind == "batchnorm" and shape[0] != layer.bn.num_channels:
        raise DimensionError(f"layer {layer.name!r} cannot consume shape {shape}")
    return tuple(shape)


@dataclass
class Model:
    layers: list = field(default_factory=list)
    input_shape: tuple = ()
    num_classes: int | None = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.input_shape = tuple(int(d) for d in self.input_shape)
        for i, layer in enumerate(self.layers):
            if not layer.name:
                layer.name = f"layer{i}"
        seen = set()
        for name in self.layer_names:
            if name in seen:
                raise DuplicateLayerError(f"duplicate layer name {name!r}")
            seen.add(name)
        if self.input_shape:
            self.layer_shapes()

    @property
    def layer_names(self):
        return [layer.name for layer in self.layers]

    def layer_shapes(self):
        """Per-sample output shape of every layer (checks chain compatibility)."""
        shapes, shape = [], self.input_shape
        for layer in self.layers:
            shape = _output_shape(layer, shape)
            shapes.append(shape)
        return shapes

    def index_of(self, name):
        try:
            return self.layer_names.index(name)
        except ValueError:
            raise KeyError(f"unknown layer name {name!r}") from None

    def layer(self, name):
        return self.layers[self.index_of(name)]

    def prunable_layers(self):
        return [layer for layer in self.layers if layer.prunable]

    @property
    def activation_scales(self):
        return self.metadata.get("activation_scales", {})

    def copy(self):
        return Model(
            [layer.copy() for layer in self.layers],
            self.input_shape,
            self.num_classes,
            json.loads(json.dumps(self.metadata)),
        )

    def replace_layer(self, name, layer):
        """Copy of the model with one layer swapped out (other layers shared)."""
        idx = self.index_of(name)
        layers = list(self.layers)
        layers[idx] = layer
        return Model(layers, self.input_shape, self.num_classes, json.loads(json.dumps(self.metadata)))


# --------------------------------------------------------------------------
# forward


def _check_batch(model, batch):
    batch = np.asarray(batch, dtype=np.float32)
    if model.input_shape and tuple(batch.shape[1:]) != model.input_shape:
        raise DimensionError(
            f"batch shape {batch.shape} does not match model input shape {model.input_shape}"
        )
    return batch


def forward_with_capture(model, batch, capture=()):
    """Run the whole chain, recording input/output of the named layers.

    Returns ``(output, captured)`` where ``captured[name] = (input, output)``.
    If the model carries activation scales, the input of each scaled layer is
    fake-quantized before use and the quantized tensor is what gets recorded.
    """
    capture = set(capture)
    unknown = capture.difference(model.layer_names)
    if unknown:
        raise KeyError(f"unknown layer name(s) in capture set: {sorted(unknown)}")
    x = _check_batch(model, batch)
    scales = model.activation_scales
    if scales:
        from .quantization import fake_quantize_activations
    captured = {}
    for layer in model.layers:
        if layer.name in scales:
            x = fake_quantize_activations(x, scales[layer.name])
        y = layer_forward(layer, x)
        if layer.name in capture:
            captured[layer.name] = (x, y)
        x = y
    return x, captured


def forward(model, batch):
    return forward_with_capture(model, batch)[0]


def predict_logits(model, inputs, batch_size=256):
    """Forward ``inputs`` in chunks and stack the outputs."""
    inputs = np.asarray(inputs, dtype=np.float32)
    if len(inputs) == 0:
        raise DimensionError("no inputs to predict on")
    outs = [forward(model, inputs[i:i + batch_size]) for i in range(0, len(inputs), batch_size)]
    return np.concatenate(outs, axis=0)


# --------------------------------------------------------------------------
# batchnorm fusing


def fuse_batchnorm(model):
    """Fold every batchnorm into the linear layer right before it."""
    layers = []
    for layer in model.layers:
        if layer.kind != "batchnorm":
            layers.append(layer.copy())
            continue
        prev = layers[-1] if layers else None
        if prev is None or not prev.prunable:
            raise StructureError(
                f"batchnorm layer {layer.name!r} is not preceded by conv2d/fully_connected"
            )
        bn = layer.bn
        scale = bn.gamma.astype(np.float64) / np.sqrt(bn.running_var.astype(np.float64) + bn.eps)
        w = prev.weights.astype(np.float64)
        w = w * scale.reshape((-1,) + (1,) * (w.ndim - 1))
        b = (prev.bias_or_zeros().astype(np.float64) - bn.running_mean) * scale + bn.beta
        layers[-1] = prev.copy(weights=w.astype(np.float32), bias=b.astype(np.float32))
    metadata = json.loads(json.dumps(model.metadata))
    names = {layer.name for layer in layers}
    if "activation_scales" in metadata:
        metadata["activation_scales"] = {
            k: v for k, v in metadata["activation_scales"].items() if k in names
        }
    return Model(layers, model.input_shape, model.num_classes, metadata)


# --------------------------------------------------------------------------
# bundle persistence


def _file_stem(index, name):
    safe = re.sub(r"[^A-Za-z0-9_.-]", "_", name)
    return f"{index:03d}_{safe}"


def save_bundle(model, path):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, layer in enumerate(model.layers):
        entry = {"name": layer.name, "kind": layer.kind}
        stem = _file_stem(i, layer.name)
        tensors = {}
        if layer.kind == "conv2d":
            entry.update(stride=layer.stride, padding=layer.padding)
        if layer.weights is not None:
            tensors["weights"] = layer.weights
        if layer.bias is not None:
            tensors["bias"] = layer.bias
        if layer.bn is not None:
            entry["eps"] = layer.bn.eps
            tensors.update(
                gamma=layer.bn.gamma, beta=layer.bn.beta,
                running_mean=layer.bn.running_mean, running_var=layer.bn.running_var,
            )
        for key, arr in tensors.items():
            fname = f"{stem}.{key}.spkt"
            write_tensor(path / fname, arr)
            entry[key] = fname
        entries.append(entry)
    manifest = {
        "format": BUNDLE_FORMAT,
        "version": BUNDLE_VERSION,
        "input_shape": list(model.input_shape),
        "num_classes": model.num_classes,
        "metadata": model.metadata,
        "layers": entries,
    }
    (path / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n",
                                      encoding="utf-8")
    return path


def load_bundle(path):
    path = Path(path)
    manifest_path = path / MANIFEST_NAME
    if not manifest_path.is_file():
        raise BundleError(f"no {MANIFEST_NAME} in {path}")
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise BundleError(f"{manifest_path}: invalid JSON ({exc})") from exc
    layers = []
    seen = set()
    for i, entry in enumerate(manifest.get("layers", [])):
        kind = entry.get("kind")
        name = entry.get("name", f"layer{i}")
        if kind not in LAYER_KINDS:
            raise UnsupportedLayerError(f"layer {name!r}: unknown layer kind {kind!r}")
        if name in seen:
            raise DuplicateLayerError(f"duplicate layer name {name!r} in {manifest_path}")
        seen.add(name)

        def tensor(key):
            fname = entry.get(key)
            return None if fname is None else read_tensor(path / fname)

        bn = None
        if kind == "batchnorm":
            bn = BatchNormParams(
                tensor("gamma"), tensor("beta"), tensor("running_mean"), tensor("running_var"),
                float(entry.get("eps", DEFAULT_BN_EPS)),
            )
        try:
            layers.append(LayerSpec(
                kind=kind, name=name, weights=tensor("weights"), bias=tensor("bias"),
                stride=entry.get("stride", 1), padding=entry.get("padding", 0), bn=bn,
            ))
        except DimensionError as exc:
            raise BundleError(f"layer {name!r}: {exc}") from exc
    return Model(
        layers,
        tuple(manifest.get("input_shape", ())),
        manifest.get("num_classes"),
        manifest.get("metadata", {}),
    )


def count_zeros(model):
    """(zero weights, total weights) over prunable layers."""
    zeros = total = 0
    for layer in model.prunable_layers():
        zeros += int(np.count_nonzero(layer.weights == 0))
        total += layer.weights.size
    return zeros, total


__all__ = [
    "Model", "write_tensor", "read_tensor", "save_bundle", "load_bundle",
    "fuse_batchnorm", "forward", "forward_with_capture", "predict_logits", "count_zeros",
    "as_tensor",
]
