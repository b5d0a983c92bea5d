"""Input validation helpers for the estimator-facing API."""

from __future__ import annotations

import numpy as np

from .errors import ContractError, DimensionError


def check_image_array(X, n_patches: int, hidden_dim: int) -> np.ndarray:
    """Coerce X to (n_samples, n_patches, hidden_dim) float64.

    Accepts either the 3-d patch layout or the flattened 2-d
    (n_samples, n_patches * hidden_dim) layout used by array pipelines.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 2:
        if X.shape[1] != n_patches * hidden_dim:
            raise DimensionError(
                f"expected {n_patches * hidden_dim} features "
                f"({n_patches} patches x {hidden_dim}), got {X.shape[1]}"
            )
        X = X.reshape(X.shape[0], n_patches, hidden_dim)
    elif X.ndim == 3:
        if X.shape[1:] != (n_patches, hidden_dim):
            raise DimensionError(
                f"expected samples of shape ({n_patches}, {hidden_dim}), got {X.shape[1:]}"
            )
    else:
        raise DimensionError(f"X must be 2-d or 3-d, got ndim={X.ndim}")
    if X.shape[0] == 0:
        raise ContractError("X has no samples")
    if not np.isfinite(X).all():
        raise ContractError("X contains non-finite values")
    return X


def check_labels(y, n_samples: int, num_labels: int) -> np.ndarray:
    y = np.asarray(y)
    if y.shape != (n_samples,):
        raise DimensionError(f"y has shape {y.shape}, expected ({n_samples},)")
    y = y.astype(np.int64)
    if y.size and (y.min() < 0 or y.max() >= num_labels):
        raise ContractError(f"labels must lie in [0, {num_labels})")
    return y


def check_text_features(text_features, seq_len: int, hidden_dim: int) -> np.ndarray:
    t = np.asarray(text_features, dtype=np.float64)
    if t.ndim != 3 or t.shape[1:] != (seq_len, hidden_dim):
        raise DimensionError(
            f"text_features must be (n_classes, {seq_len}, {hidden_dim}), got {t.shape}"
        )
    if t.shape[0] < 2:
        raise ContractError("need at least two classes of text features")
    if not np.isfinite(t).all():
        raise ContractError("text_features contain non-finite values")
    return t
