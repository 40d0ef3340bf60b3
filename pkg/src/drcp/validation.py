"""Input validation helpers shared by the kernels and estimators."""
from __future__ import annotations

import numpy as np


class ContractViolation(ValueError):
    """Raised when an operation's preconditions do not hold."""


class FormatError(ValueError):
    """Raised when a serialized tensor or bundle is malformed."""


def check_feature_map(x, name="input", channels=None, finite=True):
    """Return ``x`` as a C-contiguous float32 array of shape (C, H, W)."""
    arr = np.ascontiguousarray(x, dtype=np.float32)
    if arr.ndim != 3:
        raise ContractViolation(f"{name} must be a (C, H, W) feature map, got shape {arr.shape}")
    if channels is not None and arr.shape[0] != channels:
        raise ContractViolation(f"{name} has {arr.shape[0]} channels, expected {channels}")
    if finite and not np.isfinite(arr).all():
        raise ContractViolation(f"{name} contains non-finite values")
    return arr


def check_feature_batch(X, name="X"):
    """Accept a single (C, H, W) map or a (N, C, H, W) batch; always return 4-D float32."""
    arr = np.asarray(X, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4:
        raise ContractViolation(f"{name} must have shape (N, C, H, W) or (C, H, W), got {arr.shape}")
    if not np.isfinite(arr).all():
        raise ContractViolation(f"{name} contains non-finite values")
    return np.ascontiguousarray(arr)


def check_positive(value, name):
    if not value > 0:
        raise ContractViolation(f"{name} must be positive, got {value}")
    return value


def check_same_shape(a, b, names=("a", "b")):
    if np.shape(a) != np.shape(b):
        raise ContractViolation(f"shape mismatch: {names[0]} {np.shape(a)} vs {names[1]} {np.shape(b)}")
