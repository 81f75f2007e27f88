"""Input checks shared by the estimator layer."""

from __future__ import annotations

import numpy as np
from sklearn.exceptions import NotFittedError

from .errors import DataError


def check_is_fitted(estimator, attributes):
    missing = [a for a in attributes if not hasattr(estimator, a)]
    if missing:
        raise NotFittedError(
            f"{type(estimator).__name__} is not fitted yet; call fit first "
            f"(missing {', '.join(missing)})"
        )


def as_video_dict(X, ndim, what):
    """Normalize videos to an ordered {video_id: float64 array} dict.

    Accepts a dict keyed by id or a sequence (ids become v000, v001, ...).
    Every value must be an ``ndim``-dimensional array.
    """
    if isinstance(X, dict):
        items = [(str(k), X[k]) for k in sorted(X)]
    else:
        items = [(f"v{i:03d}", x) for i, x in enumerate(X)]
    if not items:
        raise DataError(f"no {what} provided")
    out = {}
    for vid, arr in items:
        arr = np.asarray(arr, dtype=np.float64)
        if arr.ndim != ndim or arr.shape[0] == 0:
            raise DataError(
                f"{what} {vid!r} must be a non-empty {ndim}-D array, "
                f"got shape {arr.shape}"
            )
        out[vid] = arr
    return out


def as_label_dict(y, videos, num_classes=None):
    """Normalize labels to {video_id: int64 array} aligned with ``videos``."""
    if isinstance(y, dict):
        items = {str(k): v for k, v in y.items()}
    else:
        ids = list(videos)
        if len(y) != len(ids):
            raise DataError(f"{len(ids)} videos but {len(y)} label sequences")
        items = dict(zip(ids, y))
    out = {}
    for vid, arr in videos.items():
        if vid not in items:
            raise DataError(f"video {vid!r} has no labels")
        lab = np.asarray(items[vid], dtype=np.int64)
        if lab.ndim != 1 or lab.shape[0] != arr.shape[0]:
            raise DataError(
                f"video {vid!r}: {arr.shape[0]} frames but labels shape {lab.shape}"
            )
        if lab.min() < 0:
            raise DataError(f"video {vid!r}: negative phase id {lab.min()}")
        if num_classes is not None and lab.max() >= num_classes:
            raise DataError(
                f"video {vid!r}: phase {lab.max()} out of range for "
                f"{num_classes} classes"
            )
        out[vid] = lab
    return out


def infer_num_classes(labels_by_video):
    return int(max(lab.max() for lab in labels_by_video.values())) + 1
