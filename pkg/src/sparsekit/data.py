"""Labeled image sets, image directories and input preprocessing."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .exceptions import DataError
from .model import read_tensor
from .syndata import read_image

IMAGE_SUFFIXES = {".ppm", ".pgm", ".pnm", ".png"}
TENSOR_SUFFIXES = {".spkt"}
DATASET_MANIFEST = "dataset.json"


@dataclass
class PreprocessSpec:
    """Resize (shorter side), center crop, then per-channel ``(x - mean) / std``."""

    resize: int | None = None
    crop: int | None = None
    mean: tuple = (0.0,)
    std: tuple = (1.0,)

    @classmethod
    def from_dict(cls, d):
        d = dict(d or {})
        return cls(d.get("resize"), d.get("crop"), tuple(d.get("mean", (0.0,))), tuple(d.get("std", (1.0,))))

    def to_dict(self):
        return {"resize": self.resize, "crop": self.crop, "mean": list(self.mean), "std": list(self.std)}


def _resize_channel(ch, h, w):
    if ch.shape == (h, w):
        return ch
    shrinking = h < ch.shape[0] or w < ch.shape[1]
    im = Image.fromarray(np.ascontiguousarray(ch, dtype=np.float32), mode="F")
    im = im.resize((w, h), resample=Image.BOX if shrinking else Image.BILINEAR)
    return np.asarray(im, dtype=np.float32)


def preprocess_image(img, spec, channels=None):
    """Preprocess one ``(C, H, W)`` image with values in [0, 1]."""
    img = np.asarray(img, dtype=np.float32)
    if img.ndim == 2:
        img = img[None]
    if channels is not None and img.shape[0] != channels:
        if img.shape[0] == 1:
            img = np.repeat(img, channels, axis=0)
        else:
            raise DataError(f"image has {img.shape[0]} channels, model expects {channels}")
    if spec.resize:
        h, w = img.shape[1:]
        scale = spec.resize / min(h, w)
        nh, nw = max(1, round(h * scale)), max(1, round(w * scale))
        img = np.stack([_resize_channel(c, nh, nw) for c in img])
    if spec.crop:
        h, w = img.shape[1:]
        if spec.crop > min(h, w):
            raise DataError(f"crop {spec.crop} larger than image {h}x{w}")
        top, left = (h - spec.crop) // 2, (w - spec.crop) // 2
        img = img[:, top:top + spec.crop, left:left + spec.crop]
    mean = np.asarray(spec.mean, dtype=np.float32).reshape(-1, 1, 1)
    std = np.asarray(spec.std, dtype=np.float32).reshape(-1, 1, 1)
    return ((img - mean) / std).astype(np.float32)


def preprocess_batch(images, spec, channels=None):
    return np.stack([preprocess_image(im, spec, channels) for im in images]).astype(np.float32)


def load_input_file(path):
    """Load one image or tensor file. Tensor files may hold one sample or a batch."""
    path = Path(path)
    if path.suffix.lower() in TENSOR_SUFFIXES:
        return read_tensor(path)
    if path.suffix.lower() in IMAGE_SUFFIXES:
        return read_image(path)
    raise DataError(f"unsupported input file type: {path}")


@dataclass
class EvalDataset:
    """(input file, label) pairs plus the preprocessing applied before inference.

    ``index`` selects one sample from a batched tensor file.
    """

    samples: list
    preprocess: PreprocessSpec = field(default_factory=PreprocessSpec)
    num_classes: int | None = None
    root: Path = Path(".")

    @classmethod
    def from_manifest(cls, path, split=None):
        path = Path(path)
        if path.is_dir():
            path = path / DATASET_MANIFEST
        if not path.is_file():
            raise DataError(f"no dataset manifest at {path}")
        raw = json.loads(path.read_text(encoding="utf-8"))
        samples = raw.get("samples", [])
        if split is not None:
            samples = [s for s in samples if s.get("split") == split]
        return cls(samples, PreprocessSpec.from_dict(raw.get("preprocess")), raw.get("num_classes"), path.parent)

    def __len__(self):
        return len(self.samples)

    def raw_images(self):
        cache = {}
        out = []
        for s in self.samples:
            f = self.root / s["file"]
            if f not in cache:
                cache[f] = load_input_file(f)
            arr = cache[f]
            out.append(arr[s["index"]] if "index" in s else arr)
        return out

    def labels(self):
        return np.asarray([int(s["label"]) for s in self.samples], dtype=np.int64)

    def load(self, channels=None):
        """Return ``(X, y)`` with ``X`` preprocessed and stacked."""
        if not self.samples:
            raise DataError("dataset is empty")
        return preprocess_batch(self.raw_images(), self.preprocess, channels), self.labels()


def load_input_dir(path):
    """Raw inputs from a directory: a dataset manifest if present, else every image/tensor file."""
    path = Path(path)
    if (path / DATASET_MANIFEST).is_file():
        return EvalDataset.from_manifest(path).raw_images()
    if not path.is_dir():
        raise DataError(f"calibration directory not found: {path}")
    out = []
    for f in sorted(path.iterdir()):
        if f.suffix.lower() in IMAGE_SUFFIXES:
            out.append(read_image(f))
        elif f.suffix.lower() in TENSOR_SUFFIXES:
            arr = read_tensor(f)
            out.extend(arr if arr.ndim == 4 else [arr])
    if not out:
        raise DataError(f"no images or tensor files in {path}")
    return out


def sample_pool(items, size, seed):
    """Uniform sample without replacement (all items if fewer than ``size``)."""
    n = len(items)
    idx = np.random.default_rng(seed).choice(n, size=min(size, n), replace=False)
    return [items[i] for i in idx]
