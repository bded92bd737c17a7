"""Small input-validation helpers shared by the estimators and value types."""
import numbers

import numpy as np
from sklearn.utils.validation import check_array


def check_positive(value, name):
    if not isinstance(value, numbers.Real) or not value > 0:
        raise ValueError(f"{name} must be > 0, got {value!r}")
    return value


def check_nonneg(value, name):
    if not isinstance(value, numbers.Real) or value < 0:
        raise ValueError(f"{name} must be >= 0, got {value!r}")
    return value


def check_int_at_least(value, minimum, name):
    if isinstance(value, bool) or not isinstance(value, numbers.Integral) or value < minimum:
        raise ValueError(f"{name} must be an integer >= {minimum}, got {value!r}")
    return int(value)


def check_design(X, y=None, n_columns=None):
    """Validate a float design matrix (and optional target) for the linear fits."""
    X = check_array(X, dtype=np.float64, ensure_2d=True, ensure_min_samples=1)
    if n_columns is not None and X.shape[1] != n_columns:
        raise ValueError(f"expected {n_columns} columns, got {X.shape[1]}")
    if y is None:
        return X
    y = check_array(y, dtype=np.float64, ensure_2d=False)
    if y.ndim != 1 or y.shape[0] != X.shape[0]:
        raise ValueError(f"target shape {y.shape} does not match {X.shape[0]} samples")
    return X, y
