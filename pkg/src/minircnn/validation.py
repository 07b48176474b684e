"""Input validation helpers for the estimator-facing API."""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor
from .boxes import Box
from .errors import ShapeError, ValidationError


def check_image(x) -> np.ndarray:
    """Normalize an image argument to a (3, H, W) float64 array in [0, 1].

    Accepts tensors or arrays in channel-first (3, H, W) or channel-last
    (H, W, 3) layout; integer arrays are assumed to be 8-bit and rescaled.
    """
    arr = x.data if isinstance(x, Tensor) else np.asarray(x)
    if arr.ndim != 3:
        raise ShapeError(f"image must be 3-dimensional, got shape {arr.shape}")
    if arr.shape[0] != 3 and arr.shape[2] == 3:
        arr = arr.transpose(2, 0, 1)
    if arr.shape[0] != 3:
        raise ShapeError(f"image needs 3 channels, got shape {arr.shape}")
    if np.issubdtype(arr.dtype, np.integer):
        arr = arr.astype(np.float64) / 255.0
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    if not np.isfinite(arr).all():
        raise ValidationError("image contains non-finite values")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ValidationError("image values must lie in [0, 1]")
    return arr


def check_box(b) -> Box:
    """Coerce a Box or a 4-sequence (xmin, ymin, xmax, ymax) to a Box."""
    if isinstance(b, Box):
        return b
    arr = np.asarray(b, dtype=np.float64).reshape(-1)
    if arr.size != 4:
        raise ShapeError(f"a box needs 4 coordinates, got {arr.size}")
    return Box(float(arr[0]), float(arr[1]), float(arr[2]), float(arr[3]))


def check_targets(y, image_shape=None) -> list[tuple[str, Box]]:
    """Validate one image's target list of (label, box) pairs."""
    out = []
    for item in y:
        if len(item) != 2:
            raise ValidationError(f"target entries must be (label, box) pairs, got {item!r}")
        label, box = item
        box = check_box(box)
        if image_shape is not None:
            _, h, w = image_shape
            if box.xmin < 0 or box.ymin < 0 or box.xmax > w or box.ymax > h:
                raise ValidationError(f"box {box} exceeds image bounds {w}x{h}")
        out.append((str(label), box))
    return out
