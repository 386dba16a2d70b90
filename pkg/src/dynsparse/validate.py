"""Input validation helpers shared across modules."""

import numpy as np


class NumericalError(Exception):
    """A computation produced a non-finite result."""


def as_matrix(name: str, x, dtype=None) -> np.ndarray:
    """Coerce to a 2D array of finite reals; raise ValueError otherwise.

    dtype=None keeps a float input's precision (float32 stays float32 for
    the throughput mode); any other input is promoted to float64.
    """
    arr = np.asarray(x)
    if dtype is not None:
        arr = arr.astype(dtype, copy=False)
    elif arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float64)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains NaN or Inf")
    return arr


def check_same_cols(name_a: str, a: np.ndarray, name_b: str, b: np.ndarray) -> None:
    if a.shape[1] != b.shape[1]:
        raise ValueError(
            f"{name_a} and {name_b} must share the inner dimension: "
            f"{a.shape[1]} != {b.shape[1]}"
        )


def check_unit_interval(name: str, value: float, *, open_low=False, open_high=False) -> float:
    value = float(value)
    low_ok = value > 0.0 if open_low else value >= 0.0
    high_ok = value < 1.0 if open_high else value <= 1.0
    if not (low_ok and high_ok and np.isfinite(value)):
        lo = "(" if open_low else "["
        hi = ")" if open_high else "]"
        raise ValueError(f"{name} must lie in {lo}0, 1{hi}, got {value}")
    return value
