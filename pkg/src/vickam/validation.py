"""Input checks shared by the estimators and the pipeline."""

import numpy as np
from sklearn.utils.validation import check_array

from .errors import ShapeError


def check_grids(X):
    """Batch of feature maps as a finite float32 ``(N, h, w, C)`` array."""
    X = check_array(X, allow_nd=True, ensure_2d=False, dtype=np.float32,
                    ensure_all_finite=True, ensure_min_samples=0)
    if X.ndim != 4:
        raise ShapeError(f"feature maps must be (N, h, w, C), got shape {X.shape}")
    return np.ascontiguousarray(X)


def check_group_labels(y, n_groups, n_samples):
    y = np.asarray(y)
    if y.shape != (n_samples,):
        raise ShapeError(f"expected {n_samples} group labels, got shape {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.equal(np.mod(y, 1), 0)):
            raise ValueError("group labels must be integers")
        y = y.astype(np.int64)
    if n_samples and (y.min() < 0 or y.max() >= n_groups):
        raise ValueError(f"group labels must lie in [0, {n_groups})")
    return y.astype(np.int64)


def check_boxes(boxes, n_samples, h, w, n_actions):
    boxes = [tuple(b) for b in boxes]
    if len(boxes) != n_samples:
        raise ShapeError(f"{len(boxes)} box lists for {n_samples} samples")
    for bxs in boxes:
        for b in bxs:
            b.validate(h, w, n_actions)
    return boxes
