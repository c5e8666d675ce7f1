import numpy as np

from .exceptions import DataError


def topk_accuracy(logits, labels, k=1):
    """Fraction of rows whose label is among the ``k`` largest logits.

    Equal logits rank the lower class index first.
    """
    logits = np.asarray(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or len(logits) != len(labels):
        raise DataError(f"logits {logits.shape} do not match {len(labels)} labels")
    if len(labels) == 0:
        raise DataError("cannot evaluate on an empty dataset")
    if k < 1:
        raise ValueError("k must be >= 1")
    n_classes = logits.shape[1]
    if labels.min() < 0 or labels.max() >= n_classes:
        raise DataError(f"label outside [0, {n_classes})")
    ranked = np.argsort(-logits, axis=1, kind="stable")[:, :k]
    return float(np.mean(np.any(ranked == labels[:, None], axis=1)))
