"""Input checks shared by the estimator, cross-validation and the CLI."""
from __future__ import annotations

import numbers

import numpy as np
from sklearn.utils import check_array

from .data import UNKNOWN, DatasetError

__all__ = ["check_profiles", "is_unlabelled", "encode_partial_labels", "check_marker_counts"]


def check_profiles(X, n_features=None) -> np.ndarray:
    """Finite float64 ``N x D`` array with ``D >= 2``; ``n_features`` pins ``D``."""
    X = check_array(X, dtype=np.float64, ensure_min_features=2, ensure_all_finite=True)
    if n_features is not None and X.shape[1] != n_features:
        raise ValueError(f"X has {X.shape[1]} features, expected {n_features}")
    return X


def is_unlabelled(value) -> bool:
    """``None``, NaN, ``-1``, empty or ``"unknown"`` mark a protein without a label."""
    if value is None:
        return True
    if isinstance(value, str):
        return value.strip() in ("", UNKNOWN)
    if isinstance(value, numbers.Real):
        return value != value or value == -1
    return False


def encode_partial_labels(y, n_samples):
    """Split partial labels into sorted classes and integer codes (-1 = unlabelled)."""
    y = np.asarray(y, dtype=object).ravel()
    if y.size != n_samples:
        raise ValueError(f"y has {y.size} entries for {n_samples} samples")
    mask = np.array([not is_unlabelled(v) for v in y], dtype=bool)
    if not mask.any():
        raise ValueError("y has no labelled samples")
    if len({isinstance(v, str) for v in y[mask]}) > 1:
        raise ValueError("labels mix strings and numbers")
    known = np.array(y[mask].tolist())
    classes = np.unique(known)
    codes = np.full(n_samples, -1, dtype=int)
    codes[mask] = np.searchsorted(classes, known)
    return classes, codes


def check_marker_counts(codes, n_classes, min_markers=2):
    counts = np.bincount(codes[codes >= 0], minlength=n_classes)
    low = np.flatnonzero(counts < min_markers)
    if low.size:
        raise DatasetError(
            f"class index(es) {low.tolist()} have fewer than {min_markers} labelled samples"
        )
    return counts
