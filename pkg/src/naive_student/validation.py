"""Input checks shared by the estimator wrappers."""

from __future__ import annotations

from typing import List, Optional, Sequence

import numpy as np
from sklearn.utils.validation import check_is_fitted as _sk_check_is_fitted

from .types import ClassTable, validate_panoptic


def check_image(image, name: str = "image") -> np.ndarray:
    """An (H, W, 3) uint8 or float array; floats must be finite."""
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"{name} must have shape (H, W, 3), got {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError(f"{name} is empty")
    if arr.dtype != np.uint8:
        if not np.issubdtype(arr.dtype, np.number):
            raise TypeError(f"{name} must be numeric, got {arr.dtype}")
        arr = arr.astype(np.float64)
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"{name} contains NaN or inf")
    return arr


def check_images(images) -> List[np.ndarray]:
    """A list of images; a single 4-d array is split along its first axis."""
    if isinstance(images, np.ndarray) and images.ndim == 3:
        raise ValueError("expected a batch of images, got a single (H, W, 3) array")
    out = [check_image(im, f"images[{i}]") for i, im in enumerate(images)]
    if not out:
        raise ValueError("no images given")
    return out


def check_panoptic_maps(maps, images: Sequence[np.ndarray],
                        class_table: Optional[ClassTable] = None) -> List[np.ndarray]:
    if len(maps) != len(images):
        raise ValueError(f"got {len(maps)} label maps for {len(images)} images")
    out = []
    for i, (m, im) in enumerate(zip(maps, images)):
        m = validate_panoptic(np.asarray(m), class_table)
        if m.shape != im.shape[:2]:
            raise ValueError(f"label map {i} has shape {m.shape}, image has {im.shape[:2]}")
        out.append(m)
    return out


def check_is_fitted(estimator, attribute: str) -> None:
    """Raise sklearn's ``NotFittedError`` unless ``attribute`` is set."""
    _sk_check_is_fitted(estimator, attributes=[attribute])
