"""Input validation helpers shared by the estimators."""
import numpy as np

from .phantom import IMAGE_SIZE


def check_images(X, allow_empty: bool = False) -> np.ndarray:
    """Return ``X`` as an N x 64 x 64 x 3 uint8 array or raise ``ValueError``."""
    X = np.asarray(X)
    if X.ndim == 3:
        X = X[None]
    expected = (IMAGE_SIZE, IMAGE_SIZE, 3)
    if X.ndim != 4 or X.shape[1:] != expected:
        raise ValueError(f"expected images of shape N x {IMAGE_SIZE} x {IMAGE_SIZE} x 3, got {X.shape}")
    if len(X) == 0 and not allow_empty:
        raise ValueError("empty image set")
    if X.dtype != np.uint8:
        if np.issubdtype(X.dtype, np.floating) or X.min() < 0 or X.max() > 255:
            raise ValueError(f"expected 8-bit pixel values, got dtype {X.dtype}")
        X = X.astype(np.uint8)
    return X


def check_labels(y, num_classes: int, n: int) -> np.ndarray:
    y = np.asarray(y)
    if y.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.equal(np.mod(y, 1), 0)):
            raise ValueError("labels must be integers")
        y = y.astype(np.int64)
    if n and (y.min() < 0 or y.max() >= num_classes):
        raise ValueError(f"labels must lie in [0, {num_classes})")
    return y.astype(np.int64)
