"""Input validation helpers used at the public API boundaries."""

from __future__ import annotations

import numpy as np

from .core import Annotation, FrameMatrix


def check_features(x, name: str = "features") -> FrameMatrix:
    """Accept a FrameMatrix and verify it carries finite 2-D data."""
    if not isinstance(x, FrameMatrix):
        raise TypeError(f"{name} must be a FrameMatrix, got {type(x).__name__}")
    if not np.isfinite(x.data).all():
        raise ValueError(f"{name} contains non-finite values")
    return x


def check_annotation(y, name: str = "annotation") -> Annotation:
    if not isinstance(y, Annotation):
        raise TypeError(f"{name} must be an Annotation, got {type(y).__name__}")
    return y


def check_paired_lists(X, y) -> tuple[list, list]:
    """Normalize (X, y) into equal-length lists of recordings and references."""
    X = [X] if isinstance(X, FrameMatrix) else list(X)
    y = [y] if isinstance(y, Annotation) else list(y)
    if len(X) != len(y):
        raise ValueError(f"got {len(X)} recordings but {len(y)} annotations")
    if not X:
        raise ValueError("need at least one recording")
    return (
        [check_features(x, f"X[{i}]") for i, x in enumerate(X)],
        [check_annotation(a, f"y[{i}]") for i, a in enumerate(y)],
    )


def check_binary_matrix(arr, name: str = "labels") -> np.ndarray:
    arr = np.asarray(arr)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.isin(arr, (0, 1)).all():
        raise ValueError(f"{name} must contain only 0s and 1s")
    return arr
