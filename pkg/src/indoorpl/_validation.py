"""Small input-validation helpers shared across modules."""

import numpy as np
from sklearn.utils import check_array

from .exceptions import DegenerateSample, InputError


def check_sample(x, *, min_n=1, name="residuals", allow_constant=True):
    """Return ``x`` as a finite 1-D float array with at least ``min_n`` entries."""
    arr = np.asarray(x, dtype=float)
    if arr.ndim != 1:
        arr = arr.ravel()
    if arr.size < min_n:
        raise InputError(f"{name}: need at least {min_n} values, got {arr.size}")
    if not np.all(np.isfinite(arr)):
        raise InputError(f"{name}: contains NaN or infinite values")
    if not allow_constant and arr.size and np.ptp(arr) == 0.0:
        raise DegenerateSample(f"{name}: zero variance")
    return arr


def check_matrix(X, *, name="X", min_rows=1):
    X = check_array(X, dtype=np.float64, ensure_2d=True, ensure_min_samples=min_rows,
                    input_name=name)
    return X


def check_open_unit(q, name="q"):
    q = float(q)
    if not 0.0 < q < 1.0:
        raise InputError(f"{name} must lie in (0, 1), got {q}")
    return q


def check_positive(v, name):
    v = float(v)
    if not v > 0.0 or not np.isfinite(v):
        raise InputError(f"{name} must be a positive finite number, got {v}")
    return v
