"""Convergence diagnostics over search-logit matrices.

All metrics are pure functions of the logits. Dominance is measured on
row-wise softmax gaps rather than raw logits: gaps are shift-invariant and
bounded in (0, 1), so one threshold works at any logit scale.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError


@dataclass(frozen=True)
class DominanceConfig:
    delta: float = 0.3    # softmax gap that counts as dominance
    epsilon: float = 0.05  # relative margin below which a row is fragile

    def __post_init__(self):
        if not 0 < self.delta < 1:
            raise ContractError(f"delta must be in (0, 1), got {self.delta}")
        if self.epsilon <= 0:
            raise ContractError(f"epsilon must be positive, got {self.epsilon}")


def _as_array(alpha) -> np.ndarray:
    if hasattr(alpha, "tensor"):
        return np.asarray(alpha.tensor.data, dtype=float)
    if hasattr(alpha, "data"):
        return np.asarray(alpha.data, dtype=float)
    return np.asarray(alpha, dtype=float)


def _row_softmax(a: np.ndarray) -> np.ndarray:
    e = np.exp(a - a.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def alpha_difference(alpha) -> float:
    """Sum over rows and columns of |beta_ij - beta_ik|, k the row argmax."""
    a = _as_array(alpha)
    beta = _row_softmax(a)
    top = beta[np.arange(a.shape[0]), a.argmax(axis=1)][:, None]
    return float(np.abs(beta - top).sum())


def num_dominants(alpha, cfg: DominanceConfig = DominanceConfig()) -> int:
    """Count (argmax, other) pairs per row whose softmax gap reaches delta."""
    a = _as_array(alpha)
    beta = _row_softmax(a)
    k = a.argmax(axis=1)
    top = beta[np.arange(a.shape[0]), k][:, None]
    gaps = top - beta
    gaps[np.arange(a.shape[0]), k] = -1.0  # exclude the argmax itself
    return int((gaps >= cfg.delta).sum())


def is_single_dominant(alpha, cfg: DominanceConfig = DominanceConfig()) -> bool:
    """True iff every row contributes all of its possible dominant pairs."""
    a = _as_array(alpha)
    rows, cols = a.shape
    return num_dominants(a, cfg) == rows * (cols - 1)


def fragile_rows(alpha, epsilon: float = DominanceConfig().epsilon) -> list[int]:
    """Rows whose top-two logits are too close for the argmax to be stable.

    A row is fragile when the top-two values differ by less than
    epsilon * max(|top1|, |top2|, 1); the floor of 1 keeps the margin
    meaningful for near-zero logits.
    """
    if epsilon <= 0:
        raise ContractError(f"epsilon must be positive, got {epsilon}")
    a = _as_array(alpha)
    out = []
    for i, row in enumerate(a):
        top2 = np.sort(row)[-2:]
        margin = epsilon * max(abs(top2[0]), abs(top2[1]), 1.0)
        if top2[1] - top2[0] < margin:
            out.append(i)
    return out
