"""Gaze prediction head, angular loss and the angular-error metric."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from gazemoe import tensor as T
from gazemoe.errors import ContractError, DegeneratePredictionError, NumericError
from gazemoe.nn import Linear
from gazemoe.tensor import Tensor

NORM_EPS = 1e-8


def pool_and_predict(y: Tensor, head: Linear) -> Tensor:
    """Mean over the token axis, then a linear map to an unnormalized 3-vector.

    Accepts (L, d) or batched (B, L, d) token matrices.
    """
    y = T.as_tensor(y)
    if y.shape[-2] == 0:
        raise ContractError("cannot pool an empty token sequence")
    return head(y.mean(axis=-2))


def _check_norms(pred: np.ndarray, target: np.ndarray) -> None:
    if not (np.all(np.isfinite(pred)) and np.all(np.isfinite(target))):
        raise NumericError("non-finite gaze vector")
    if np.any(np.linalg.norm(pred, axis=-1) <= NORM_EPS):
        raise DegeneratePredictionError("predicted gaze has near-zero norm (collapsed head)")
    if np.any(np.linalg.norm(target, axis=-1) <= NORM_EPS):
        raise DegeneratePredictionError("target gaze has near-zero norm")


def angular_loss(pred: Tensor, target) -> Tensor:
    """``1 - cos(pred, target)``, averaged over any leading batch axes."""
    pred = T.as_tensor(pred)
    target = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=pred.dtype)
    _check_norms(pred.data, target)
    unit_target = target / np.linalg.norm(target, axis=-1, keepdims=True)
    cos = (T.l2_normalize(pred, axis=-1) * unit_target).sum(axis=-1)
    return (1.0 - cos).mean()


def cosine_similarity(pred: np.ndarray, target: np.ndarray) -> np.ndarray:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    _check_norms(pred, target)
    num = (pred * target).sum(axis=-1)
    return num / (np.linalg.norm(pred, axis=-1) * np.linalg.norm(target, axis=-1))


def angular_error_degrees(pred, target) -> np.ndarray:
    """Per-sample angle between predicted and true gaze, in degrees (evaluation only)."""
    pred = pred.data if isinstance(pred, Tensor) else pred
    cos = np.clip(cosine_similarity(pred, target), -1.0, 1.0)
    return np.degrees(np.arccos(cos))


@dataclass
class LossBreakdown:
    angular: Tensor
    load_balance: Tensor
    total: Tensor

    def values(self) -> dict:
        return {"angular": self.angular.item(), "load_balance": self.load_balance.item(), "total": self.total.item()}


def total_loss(angular: Tensor, load_balance, coeff: float) -> Tensor:
    """Angular loss plus the weighted load-balancing term; weight decay lives in the optimizer."""
    return T.as_tensor(angular) + T.as_tensor(load_balance) * float(coeff)
