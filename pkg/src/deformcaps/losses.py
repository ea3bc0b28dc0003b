"""Training objective: heatmap focal loss, Dice reconstruction, L1 box terms."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .numerics import Tensor, as_tensor

logger = logging.getLogger(__name__)

EPS = 1e-7


@dataclass
class LossWeights:
    lambda_r_initial: float = 0.1
    lambda_r_final: float = 2.0
    lambda_s: float = 0.1
    lambda_o: float = 1.0
    alpha: float = 2.0
    beta: float = 4.0
    switch_at: float = 0.5

    def __post_init__(self):
        for name, v in vars(self).items():
            if v < 0:
                raise ValueError(f"LossWeights.{name} must be >= 0, got {v}")

    def lambda_r(self, progress: float) -> float:
        return self.lambda_r_initial if progress < self.switch_at else self.lambda_r_final


@dataclass
class LossParts:
    heatmap: Tensor
    recon: Tensor
    size: Tensor
    offset: Tensor


def focal_heatmap_loss(H_pred, H_gt: np.ndarray, alpha: float = 2.0, beta: float = 4.0,
                       P: int | None = None) -> Tensor:
    """Penalty-reduced pixel-wise focal loss, normalized by max(P, 1).

    Cells with target exactly 1.0 are positives. Predictions are clamped to
    [1e-7, 1 - 1e-7] before taking logs.
    """
    H_pred = as_tensor(H_pred)
    H_gt = np.asarray(H_gt, dtype=np.float64)
    if H_pred.shape != H_gt.shape:
        raise nx.ShapeError(f"prediction {H_pred.shape} and target {H_gt.shape} differ")
    pos = H_gt == 1.0
    if P is None:
        P = int(pos.sum())
    clamped = (H_pred.data < EPS) | (H_pred.data > 1 - EPS)
    if clamped.any():
        logger.debug("clamping %d heatmap predictions to [%g, 1-%g]", int(clamped.sum()), EPS, EPS)
    p = nx.clip(H_pred, EPS, 1 - EPS)
    pos_term = ((1.0 - p) ** alpha) * nx.log(p)
    neg_weight = np.where(pos, 0.0, (1.0 - H_gt) ** beta)
    neg_term = (p ** alpha) * nx.log(1.0 - p)
    total = nx.tsum(pos_term * pos.astype(np.float64)) + nx.tsum(neg_term * neg_weight)
    return total * (-1.0 / max(P, 1))


def dice_coefficient(mask_pred, mask_gt: np.ndarray) -> Tensor:
    """2 sum(r m) / (sum r^2 + sum m^2), averaged over leading mask axes.

    A pair with an all-zero denominator counts as perfect overlap.
    """
    r = as_tensor(mask_pred)
    m = np.asarray(mask_gt, dtype=np.float64)
    if r.shape != m.shape:
        raise nx.ShapeError(f"mask prediction {r.shape} and target {m.shape} differ")
    axes = (-2, -1)
    num = nx.tsum(r * m, axis=axes) * 2.0
    den = nx.tsum(r * r, axis=axes) + (m * m).sum(axis=axes)
    empty = den.data == 0
    ratio = nx.where(empty, 1.0, num / nx.where(empty, 1.0, den))
    return nx.mean(ratio)


def dice_loss(mask_pred, mask_gt: np.ndarray) -> Tensor:
    return 1.0 - dice_coefficient(mask_pred, mask_gt)


def _masked_l1(pred, target: np.ndarray, mask: np.ndarray, P: int | None) -> Tensor:
    pred = as_tensor(pred)
    target = np.asarray(target, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    if pred.shape != target.shape:
        raise nx.ShapeError(f"prediction {pred.shape} and target {target.shape} differ")
    if P is None:
        P = int(mask.sum())
    if P == 0:
        return Tensor(0.0)
    # mask is [..., h, w]; predictions carry a (x, y) axis just before it
    m = np.expand_dims(mask, -3)
    diff = nx.where(m > 0, pred - target, 0.0)
    return nx.tsum(nx.absolute(diff)) * (1.0 / P)


def offset_loss(O_pred, targets) -> Tensor:
    """Mean over centers of |dx| + |dy| between predicted and true offsets."""
    return _masked_l1(O_pred, targets.offsets, targets.mask, targets.P)


def size_loss(S_pred, targets) -> Tensor:
    return _masked_l1(S_pred, targets.sizes, targets.mask, targets.P)


def total_loss(parts: LossParts | tuple, weights: LossWeights, progress: float) -> Tensor:
    if not 0.0 <= progress <= 1.0:
        raise ValueError(f"training progress must lie in [0, 1], got {progress}")
    if not isinstance(parts, LossParts):
        parts = LossParts(*(as_tensor(v) for v in parts))
    lam_r = weights.lambda_r(progress)
    return (as_tensor(parts.heatmap) + as_tensor(parts.recon) * lam_r
            + as_tensor(parts.size) * weights.lambda_s + as_tensor(parts.offset) * weights.lambda_o)
