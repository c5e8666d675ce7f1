"""Synthetic calibration images: IFS fractals (gray or randomly colored) and white noise.

Every image is a pure function of an integer seed. Dataset-level seeds are
split per image with :class:`numpy.random.SeedSequence`, so any single
image can be regenerated without producing the others.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .exceptions import GenerationError, NumericError

MIN_MAPS, MAX_MAPS = 2, 8
MIN_DET = 1e-6
FILL_RANGE = (0.05, 0.4)
BURN_IN = 100
BOX_POINTS = 10_000
MARGIN = 0.05
DIVERGENCE_LIMIT = 1e6
MAX_ATTEMPTS = 1000
DEFAULT_SIZE = 512
DEFAULT_POINTS = 100_000
ALPHA_RANGE = (0.5, 1.5)
BETA_RANGE = (-0.2, 0.2)

KINDS = ("fractal_colored", "fractal_gray", "white_noise")


@dataclass
class IFSSystem:
    """Affine maps ``(a, b, c, d, e, f)``: (x, y) -> (a x + b y + e, c x + d y + f)."""

    maps: np.ndarray
    probabilities: np.ndarray

    @classmethod
    def from_maps(cls, maps):
        maps = np.asarray(maps, dtype=np.float64).reshape(-1, 6)
        det = np.abs(maps[:, 0] * maps[:, 3] - maps[:, 1] * maps[:, 2])
        if not np.any(det > MIN_DET):
            raise GenerationError("IFS needs at least one map with |det| > 1e-6")
        return cls(maps, det / det.sum())


def sierpinski():
    return IFSSystem.from_maps([
        (0.5, 0, 0, 0.5, 0.0, 0.0),
        (0.5, 0, 0, 0.5, 0.5, 0.0),
        (0.5, 0, 0, 0.5, 0.25, 0.5),
    ])


def _orbit(system, n, rng):
    """Chaos-game orbit of length ``n`` starting from the origin."""
    choice = rng.choice(len(system.maps), size=n, p=system.probabilities)
    maps = [tuple(m) for m in system.maps.tolist()]
    xs = np.empty(n)
    ys = np.empty(n)
    x = y = 0.0
    for i, k in enumerate(choice.tolist()):
        a, b, c, d, e, f = maps[k]
        x, y = a * x + b * y + e, c * x + d * y + f
        if not (abs(x) <= DIVERGENCE_LIMIT and abs(y) <= DIVERGENCE_LIMIT):
            raise NumericError("IFS orbit diverged (numerically unstable system)")
        xs[i] = x
        ys[i] = y
    return xs, ys


def render_fractal(system, size=DEFAULT_SIZE, n_points=DEFAULT_POINTS, seed=0):
    """Render an IFS attractor into a ``(1, size, size)`` density image in [0, 1].

    The first 100 orbit points are discarded. The frame is the bounding box
    (plus a 5% margin on each side) of the first 10k retained points, which
    does not depend on ``n_points``; later points outside it are clipped to
    the border. Each point stamps a 3x3 patch; the hit counts are
    log-scaled into [0, 1].
    """
    if size < 32:
        raise ValueError("size must be >= 32")
    if n_points < 1000:
        raise ValueError("n_points must be >= 1000")
    rng = np.random.default_rng(seed)
    xs, ys = _orbit(system, BURN_IN + max(n_points, BOX_POINTS), rng)
    xs, ys = xs[BURN_IN:], ys[BURN_IN:]
    bx, by = xs[:BOX_POINTS], ys[:BOX_POINTS]
    cx, cy = (bx.max() + bx.min()) / 2, (by.max() + by.min()) / 2
    span = max(bx.max() - bx.min(), by.max() - by.min(), 1e-12)
    usable = size * (1.0 - 2 * MARGIN)
    col = np.floor((xs[:n_points] - cx) / span * usable + size / 2).astype(np.int64)
    row = np.floor(size / 2 - (ys[:n_points] - cy) / span * usable).astype(np.int64)
    density = np.zeros((size, size), dtype=np.float64)
    for dr in (-1, 0, 1):
        for dc in (-1, 0, 1):
            np.add.at(density, (np.clip(row + dr, 0, size - 1), np.clip(col + dc, 0, size - 1)), 1.0)
    # log scaling keeps every visited pixel visible after 8-bit conversion
    return (np.log1p(density) / np.log1p(density.max()))[None].astype(np.float32)


def fill_rate(img):
    return float(np.mean(np.asarray(img) > 0))


def _draw_system(rng):
    k = int(rng.integers(MIN_MAPS, MAX_MAPS + 1))
    return IFSSystem.from_maps(rng.uniform(-1.0, 1.0, size=(k, 6)))


def _accepted_fractal(seed, size, n_points, max_attempts=MAX_ATTEMPTS):
    rng = np.random.default_rng(seed)
    for _ in range(max_attempts):
        try:
            system = _draw_system(rng)
            img = render_fractal(system, size, n_points, seed)
        except (GenerationError, NumericError):
            continue
        if FILL_RANGE[0] <= fill_rate(img) <= FILL_RANGE[1]:
            return system, img
    raise GenerationError(f"no acceptable IFS after {max_attempts} attempts (seed {seed})")


def sample_ifs(seed, size=DEFAULT_SIZE, n_points=DEFAULT_POINTS, max_attempts=MAX_ATTEMPTS):
    """Rejection-sample a random IFS whose rendering has fill rate in [0.05, 0.4].

    The acceptance render uses ``render_fractal(system, size, n_points, seed)``.
    """
    return _accepted_fractal(seed, size, n_points, max_attempts)[0]


def colorize_random(img, seed, alpha=None, beta=None):
    """Per-channel random shift-scale of a 1-channel image into 3 channels."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3:
        img = img[0]
    rng = np.random.default_rng(seed)
    if alpha is None:
        alpha = rng.uniform(*ALPHA_RANGE, size=3)
    if beta is None:
        beta = rng.uniform(*BETA_RANGE, size=3)
    alpha = np.asarray(alpha, dtype=np.float64).reshape(3, 1, 1)
    beta = np.asarray(beta, dtype=np.float64).reshape(3, 1, 1)
    return np.clip(alpha * img[None] + beta, 0.0, 1.0).astype(np.float32)


def white_noise_bytes(channels, height, width, seed):
    if min(channels, height, width) < 1:
        raise ValueError("image dimensions must be positive")
    return np.random.default_rng(seed).integers(0, 256, size=(channels, height, width), dtype=np.uint8)


def white_noise_image(channels, height, width, seed):
    return (white_noise_bytes(channels, height, width, seed) / 255.0).astype(np.float32)


def to_bytes(img):
    return np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def image_seed(root_seed, index, stream=0):
    return int(np.random.SeedSequence([root_seed, index, stream]).generate_state(1)[0])


def generate_images(kind, count, size=DEFAULT_SIZE, seed=0, n_points=DEFAULT_POINTS):
    """Yield ``(uint8 image (C, H, W), record)`` for each of ``count`` images."""
    if kind not in KINDS:
        raise ValueError(f"unknown synthetic data kind {kind!r}; expected one of {KINDS}")
    for i in range(count):
        s = image_seed(seed, i)
        record = {"index": i, "seed": s}
        if kind == "white_noise":
            img = white_noise_bytes(3, size, size, s)
        else:
            _, gray = _accepted_fractal(s, size, n_points)
            record["fill_rate"] = fill_rate(gray)
            if kind == "fractal_colored":
                cs = image_seed(seed, i, 1)
                record["color_seed"] = cs
                img = to_bytes(colorize_random(gray, cs))
            else:
                img = to_bytes(gray)
        yield img, record


def synthetic_pool(kind, count, size, seed, n_points):
    """Stack generated images as float32 ``(N, C, size, size)`` in [0, 1]."""
    imgs = [img for img, _ in generate_images(kind, count, size, seed, n_points)]
    if not imgs:
        return np.zeros((0, 3, size, size), dtype=np.float32)
    return (np.stack(imgs) / 255.0).astype(np.float32)


def write_image(path, img):
    """Write a uint8 ``(C, H, W)`` image as binary PGM (C=1) or PPM (C=3)."""
    img = np.asarray(img, dtype=np.uint8)
    if img.shape[0] == 1:
        Image.fromarray(img[0], mode="L").save(path, format="PPM")
    else:
        Image.fromarray(np.transpose(img, (1, 2, 0)), mode="RGB").save(path, format="PPM")


def read_image(path):
    """Read a PGM/PPM (or any Pillow-readable) image as float32 ``(C, H, W)`` in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im)
    if arr.ndim == 2:
        arr = arr[None]
    else:
        arr = np.transpose(arr[..., :3], (2, 0, 1))
    return (arr / 255.0).astype(np.float32)


def generate_dataset(kind, count, size=DEFAULT_SIZE, seed=0, out_dir=".", n_points=DEFAULT_POINTS):
    """Write ``count`` images plus ``manifest.json`` to ``out_dir``; return the manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for img, record in generate_images(kind, count, size, seed, n_points):
        ext = "pgm" if img.shape[0] == 1 else "ppm"
        fname = f"{record['index']:05d}.{ext}"
        write_image(out_dir / fname, img)
        entries.append({"file": fname, **record})
    manifest = {
        "kind": kind,
        "count": count,
        "size": size,
        "root_seed": seed,
        "n_points": n_points if kind != "white_noise" else None,
        "images": entries,
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    return manifest
