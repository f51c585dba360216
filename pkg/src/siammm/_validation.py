"""Input validation helpers used by the estimators and free functions."""

import numpy as np
from sklearn.utils.validation import check_array

UNIT_ATOL = 1e-9


def check_embeddings(X, *, min_dim=2, allow_empty=False):
    """Return ``X`` as a C-contiguous float64 matrix of unit rows."""
    X = check_array(X, dtype=np.float64, ensure_min_samples=0 if allow_empty else 1,
                    order="C")
    if X.shape[1] < min_dim:
        raise ValueError(f"embedding dimension must be >= {min_dim}, got {X.shape[1]}")
    norms = np.linalg.norm(X, axis=1)
    if X.shape[0] and np.max(np.abs(norms - 1.0)) > UNIT_ATOL:
        raise ValueError("embeddings must have unit L2 norm (use normalize_rows first)")
    return X


def check_unit_vector(v, name="v"):
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1:
        raise ValueError(f"{name} must be a 1-d vector, got shape {v.shape}")
    if v.shape[0] < 2:
        raise ValueError(f"{name} must have dimension >= 2")
    if abs(np.linalg.norm(v) - 1.0) > UNIT_ATOL:
        raise ValueError(f"{name} must have unit norm")
    return v


def normalize_rows(X, eps=1e-12):
    """L2-normalize each row; rows with norm below ``eps`` raise."""
    X = np.asarray(X, dtype=np.float64)
    norms = np.linalg.norm(X, axis=-1, keepdims=True)
    if np.any(norms < eps):
        raise ValueError("cannot normalize a zero-length row")
    return X / norms


def check_random_state(seed):
    """Coerce ``seed`` into a ``numpy.random.Generator``."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)
