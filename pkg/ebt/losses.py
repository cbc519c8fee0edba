"""
Cross-entropy losses over a predicted probability map and their analytic
gradients with respect to the predictions.

All three losses share one form: a per-pixel weight map w and the positive
set Y+ (edge pixels),

    L = -( sum_{Y+} w log p + sum_{Y-} w log(1 - p) ) / |Y|

with p clamped to [eps, 1 - eps]. BCE uses w = 1, WBCE uses alpha on Y+ and
lambda * (1 - alpha) on Y-, EBT uses B_c * W_c of the pixel's class.
"""

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

import config
from ebt.errors import ShapeError, UsageError
from ebt.regions import TriClassMask, as_binary_map, class_weights, classify

logger = logging.getLogger(__name__)


class LossKind(str, Enum):
    BCE = "bce"
    WBCE = "wbce"
    EBT = "ebt"


@dataclass(frozen=True)
class LossParams:
    b_e: float = config.B_E
    b_b: float = config.B_B
    b_t: float = config.B_T
    r: int = config.RADIUS
    lam: float = config.LAMBDA
    epsilon: float = config.EPSILON

    def __post_init__(self):
        for name in ("b_e", "b_b", "b_t", "lam"):
            value = getattr(self, name)
            if not value > 0:
                raise UsageError(f"{name} must be positive, got {value}")
        if not 0 < self.epsilon < 0.5:
            raise UsageError(f"epsilon must lie in (0, 0.5), got {self.epsilon}")
        if int(self.r) != self.r or self.r < 0:
            raise UsageError(f"r must be a nonnegative integer, got {self.r}")


@dataclass(frozen=True)
class LossValue:
    value: float
    # Unnormalized sums of -w*log(.) per group. EBT: (edge, boundary, texture);
    # BCE/WBCE: (positive, negative, 0).
    per_class_contribution: Tuple[float, float, float]


@dataclass(frozen=True)
class GradGrid:
    dvalues: np.ndarray

    @property
    def shape(self) -> Tuple[int, int]:
        return self.dvalues.shape


def _check_pair(pred, gt) -> Tuple[np.ndarray, np.ndarray]:
    gt = as_binary_map(gt)
    pred = np.asarray(pred, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ShapeError(f"Prediction shape {pred.shape} does not match ground truth {gt.shape}")
    return pred, gt


def _cross_entropy(
    pred: np.ndarray,
    positive: np.ndarray,
    weights: np.ndarray,
    epsilon: float,
    groups: Sequence[np.ndarray],
) -> LossValue:
    p = np.clip(pred, epsilon, 1.0 - epsilon)
    terms = np.where(positive, -weights * np.log(p), -weights * np.log1p(-p))
    contributions = [float(terms[g].sum()) for g in groups]
    contributions += [0.0] * (3 - len(contributions))
    value = float(terms.sum()) / terms.size
    return LossValue(value=value, per_class_contribution=tuple(contributions))


def _cross_entropy_grad(
    pred: np.ndarray,
    positive: np.ndarray,
    weights: np.ndarray,
    epsilon: float,
) -> GradGrid:
    p = np.clip(pred, epsilon, 1.0 - epsilon)
    grad = np.where(positive, -weights / p, weights / (1.0 - p)) / p.size
    # the clamp is flat outside [eps, 1 - eps]
    grad[(pred < epsilon) | (pred > 1.0 - epsilon)] = 0.0
    return GradGrid(dvalues=grad)


def _wbce_weights(gt: np.ndarray, lam: float) -> np.ndarray:
    positive = gt == 1
    alpha = np.count_nonzero(~positive) / gt.size
    return np.where(positive, alpha, lam * (1.0 - alpha))


def _ebt_weights(mask: TriClassMask, params: LossParams) -> np.ndarray:
    w_e, w_b, w_t = class_weights(mask).as_floats()
    weights = np.empty(mask.shape, dtype=np.float64)
    weights[mask.edge] = params.b_e * w_e
    weights[mask.boundary] = params.b_b * w_b
    weights[mask.texture] = params.b_t * w_t
    return weights


def _mask_for(gt: np.ndarray, params: LossParams, mask: Optional[TriClassMask]) -> TriClassMask:
    if mask is None:
        return classify(gt, params.r)
    if mask.shape != gt.shape:
        raise ShapeError(f"Cached mask shape {mask.shape} does not match ground truth {gt.shape}")
    return mask


def bce(pred, gt, epsilon: float = config.EPSILON) -> LossValue:
    """Unweighted cross-entropy, summed over pixels."""
    pred, gt = _check_pair(pred, gt)
    positive = gt == 1
    return _cross_entropy(pred, positive, np.ones(gt.shape), epsilon, (positive, ~positive))


def bce_grad(pred, gt, epsilon: float = config.EPSILON) -> GradGrid:
    pred, gt = _check_pair(pred, gt)
    return _cross_entropy_grad(pred, gt == 1, np.ones(gt.shape), epsilon)


def wbce(pred, gt, lam: float = config.LAMBDA, epsilon: float = config.EPSILON) -> LossValue:
    """
    Class-balanced cross-entropy: edge pixels weighted by |Y-|/|Y|, non-edge
    pixels by lam * |Y+|/|Y|.
    """
    pred, gt = _check_pair(pred, gt)
    positive = gt == 1
    return _cross_entropy(pred, positive, _wbce_weights(gt, lam), epsilon, (positive, ~positive))


def wbce_grad(pred, gt, lam: float = config.LAMBDA, epsilon: float = config.EPSILON) -> GradGrid:
    pred, gt = _check_pair(pred, gt)
    return _cross_entropy_grad(pred, gt == 1, _wbce_weights(gt, lam), epsilon)


def ebt(pred, gt, params: LossParams = LossParams(), mask: Optional[TriClassMask] = None) -> LossValue:
    """EBT loss. Pass `mask` to reuse a TriClassMask already computed for gt."""
    pred, gt = _check_pair(pred, gt)
    mask = _mask_for(gt, params, mask)
    weights = _ebt_weights(mask, params)
    groups = (mask.edge, mask.boundary, mask.texture)
    return _cross_entropy(pred, mask.edge, weights, params.epsilon, groups)


def ebt_grad(pred, gt, params: LossParams = LossParams(), mask: Optional[TriClassMask] = None) -> GradGrid:
    pred, gt = _check_pair(pred, gt)
    mask = _mask_for(gt, params, mask)
    return _cross_entropy_grad(pred, mask.edge, _ebt_weights(mask, params), params.epsilon)


def loss_and_grad(
    pred,
    gt,
    kind: LossKind,
    params: LossParams = LossParams(),
    mask: Optional[TriClassMask] = None,
) -> Tuple[LossValue, GradGrid]:
    kind = LossKind(kind)
    if kind is LossKind.EBT:
        return ebt(pred, gt, params, mask), ebt_grad(pred, gt, params, mask)
    if kind is LossKind.WBCE:
        return wbce(pred, gt, params.lam, params.epsilon), wbce_grad(pred, gt, params.lam, params.epsilon)
    return bce(pred, gt, params.epsilon), bce_grad(pred, gt, params.epsilon)


def batch_loss(
    preds: Iterable[np.ndarray],
    gts: Iterable[np.ndarray],
    kind: LossKind,
    params: LossParams = LossParams(),
) -> float:
    """Unweighted mean of per-image losses; weights are never pooled across images."""
    values: List[float] = []
    for pred, gt in zip(preds, gts):
        values.append(loss_and_grad(pred, gt, kind, params)[0].value)
    if not values:
        raise UsageError("batch_loss needs at least one image")
    return float(np.mean(values))
