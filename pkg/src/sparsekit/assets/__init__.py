"""Desk-scale reference assets shipped with the package.

``desk_cnn``      3 conv + 2 fully-connected classifier, BatchNorm folded in
``desk_cnn_bn``   the same network before folding (conv -> batchnorm -> relu)
``desk_digits``   1000 labeled 16x16 color digit images (``train``/``val`` splits)

Refer to them in configs as ``builtin:<name>``.
"""

from importlib.resources import files
from pathlib import Path

PREFIX = "builtin:"


def asset_path(name):
    return Path(str(files(__name__).joinpath(name)))


def resolve_path(path):
    if path is not None and str(path).startswith(PREFIX):
        return asset_path(str(path)[len(PREFIX):])
    return path
