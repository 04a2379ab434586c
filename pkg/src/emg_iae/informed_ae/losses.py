from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_LAMBDAS = (0.875, 0.125)


class LossShapeError(ValueError):
    pass


@dataclass(frozen=True)
class LossBreakdown:
    mse: float
    cc: float
    combined: float


def _check(N, M):
    N = np.asarray(N, dtype=float)
    M = np.asarray(M, dtype=float)
    if N.shape != M.shape:
        raise LossShapeError(f"shape mismatch: {N.shape} vs {M.shape}")
    return N, M


def loss_mse(N, M) -> float:
    N, M = _check(N, M)
    return float(np.mean((N - M) ** 2))


def loss_cc(N, M) -> float:
    """Negated mean zero-lag cross-correlation."""
    N, M = _check(N, M)
    return float(-np.mean(N * M))


def loss_combined(N, M, lambda1: float = DEFAULT_LAMBDAS[0], lambda2: float = DEFAULT_LAMBDAS[1]) -> LossBreakdown:
    if lambda1 < 0 or lambda2 < 0:
        raise ValueError("loss weights must be non-negative")
    mse = loss_mse(N, M)
    cc = loss_cc(N, M)
    return LossBreakdown(mse, cc, lambda1 * mse + lambda2 * cc)


def combined_grad(N, M, lambda1: float, lambda2: float) -> np.ndarray:
    """dL_comb/dN."""
    N, M = _check(N, M)
    return (2.0 * lambda1 * (N - M) - lambda2 * M) / N.size
