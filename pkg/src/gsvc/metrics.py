"""Image validation and PSNR/MSE helpers shared across the codec.

Frames are float64 arrays of shape ``(H, W, 3)`` with values nominally in
``[0, 1]``. PSNR uses a unit peak, is capped at a 99 dB sentinel, and a
zero-MSE comparison reports exactly the cap (keeps CSV output finite).
"""

from __future__ import annotations

import numpy as np

PSNR_CAP = 99.0


def validate_image(frame, name="frame") -> np.ndarray:
    """Check shape/finiteness and return a float64 view of ``frame``."""
    arr = np.asarray(frame, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"{name} must have shape (H, W, 3), got {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError(f"{name} must be non-empty, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def validate_mask(mask, frame_shape, name="mask") -> np.ndarray:
    """Check a boolean ROI mask against ``(H, W)`` of a frame."""
    arr = np.asarray(mask)
    if arr.dtype != np.bool_:
        arr = arr.astype(bool)
    if arr.shape != tuple(frame_shape[:2]):
        raise ValueError(
            f"{name} shape {arr.shape} does not match frame {tuple(frame_shape[:2])}"
        )
    return arr


def mse(a, b, mask=None) -> float:
    """Mean squared error over (optionally masked) pixels and channels."""
    a = validate_image(a, "a")
    b = validate_image(b, "b")
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if mask is None:
        diff = a - b
    else:
        mask = validate_mask(mask, a.shape)
        if not mask.any():
            raise ValueError("mask selects no pixels")
        diff = a[mask] - b[mask]
    return float(np.mean(diff * diff))


def psnr_from_mse(value: float) -> float:
    """``10 * log10(1 / mse)`` with the 99 dB zero-error sentinel."""
    if value < 0.0:
        raise ValueError(f"mse must be non-negative, got {value}")
    if value == 0.0:
        return PSNR_CAP
    return float(min(10.0 * np.log10(1.0 / value), PSNR_CAP))


def psnr(a, b, mask=None) -> float:
    """PSNR in dB between two unit-range images."""
    return psnr_from_mse(mse(a, b, mask=mask))
