"""Input checks shared by the estimator wrappers."""
from __future__ import annotations

import numpy as np

from .domain import DomainSpec, encode_attributes, normalize_image, validate_attributes


def check_images(X, channels: int | None = None, divisible_by: int = 16,
                 name: str = "X") -> np.ndarray:
    """Return a float32 (N, C, H, W) array in [-1, 1].

    uint8 input is normalised from [0, 255]; float input must already be
    in range.
    """
    X = np.asarray(X)
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4:
        raise ValueError(f"{name}: expected 4-D (N, C, H, W) array, got shape {X.shape}")
    if X.shape[0] == 0:
        raise ValueError(f"{name}: empty array")
    if channels is not None and X.shape[1] != channels:
        raise ValueError(f"{name}: expected {channels} channels, got {X.shape[1]}")
    h, w = X.shape[-2:]
    if divisible_by and (h % divisible_by or w % divisible_by):
        raise ValueError(f"{name}: spatial dims {h}x{w} must be divisible by {divisible_by}")
    if X.dtype == np.uint8:
        return normalize_image(X)
    X = X.astype(np.float32, copy=False)
    if not np.all(np.isfinite(X)):
        raise ValueError(f"{name}: contains NaN or infinity")
    if X.min() < -1.0 - 1e-6 or X.max() > 1.0 + 1e-6:
        raise ValueError(f"{name}: float images must lie in [-1, 1]")
    return X


def check_attribute_matrix(y, spec: DomainSpec, n_samples: int | None = None) -> np.ndarray:
    """Accept a binary (N, n_y) matrix, category names, or category indices.

    Names and indices refer to the first exclusive group (or all attributes
    when there are no groups).
    """
    arr = np.asarray(y)
    if arr.ndim == 2:
        out = arr.astype(np.float32)
    elif arr.ndim == 1:
        if arr.dtype.kind in "USO":
            out = np.stack([encode_attributes([str(v)], spec) for v in arr])
        else:
            names = spec.groups[0] if spec.groups else spec.attribute_names
            idx = arr.astype(int)
            if idx.min() < 0 or idx.max() >= len(names):
                raise ValueError(f"category index out of range [0, {len(names)})")
            out = np.stack([encode_attributes([names[i]], spec) for i in idx])
    else:
        raise ValueError(f"attributes must be 1-D or 2-D, got shape {arr.shape}")
    validate_attributes(out, spec)
    if n_samples is not None and out.shape[0] != n_samples:
        raise ValueError(f"got {out.shape[0]} attribute rows for {n_samples} images")
    return out


def check_masks(masks, n_classes: int, shape: tuple[int, ...] | None = None) -> np.ndarray:
    m = np.asarray(masks)
    if m.ndim == 2:
        m = m[None]
    if m.ndim != 3:
        raise ValueError(f"masks must be (N, H, W), got shape {m.shape}")
    if shape is not None and m.shape != shape:
        raise ValueError(f"masks shape {m.shape} does not match images {shape}")
    if m.min() < 0 or m.max() >= n_classes:
        raise ValueError(f"mask class indices must lie in [0, {n_classes})")
    return m.astype(np.int64)
