"""
Central finite-difference checks of the analytic loss gradients, with
respect to the predicted map and end-to-end with respect to the model weights.
"""

import logging
from dataclasses import dataclass
from typing import Callable, Dict, List

import numpy as np

from ebt.losses import LossKind, LossParams, ebt, ebt_grad, wbce, wbce_grad
from ebt.toymodel import K, ModelWeights, featurize, weight_grad

logger = logging.getLogger(__name__)

FD_STEP = 1e-5
REL_TOL = 1e-4
# below this magnitude both gradients count as zero
ABS_FLOOR = 1e-6


def finite_difference(func: Callable[[np.ndarray], float], x0: np.ndarray, eps: float = FD_STEP) -> np.ndarray:
    """Centered-difference gradient of a scalar function of an array."""
    x0 = np.asarray(x0, dtype=np.float64)
    grad = np.zeros_like(x0)
    x = x0.copy()
    for j in np.ndindex(x0.shape):
        x[j] = x0[j] + eps
        fplus = func(x)
        x[j] = x0[j] - eps
        fminus = func(x)
        x[j] = x0[j]
        grad[j] = (fplus - fminus) / (2 * eps)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Largest per-entry |a - n| / max(|a|, |n|, floor)."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), ABS_FLOOR)
    return float(np.max(np.abs(analytic - numeric) / scale))


@dataclass
class CheckResult:
    name: str
    max_rel_error: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= REL_TOL


def random_instance(rng: np.random.Generator, size: int, density: float = 0.15):
    """A (pred, gt) pair with predictions kept away from the log clamp."""
    gt = (rng.random((size, size)) < density).astype(np.uint8)
    if not gt.any():
        gt[size // 2, size // 2] = 1
    pred = rng.uniform(0.05, 0.95, size=(size, size))
    return pred, gt


def check_prediction_grads(pred: np.ndarray, gt: np.ndarray, params: LossParams) -> Dict[str, float]:
    numeric_ebt = finite_difference(lambda p: ebt(p, gt, params).value, pred)
    numeric_wbce = finite_difference(lambda p: wbce(p, gt, params.lam, params.epsilon).value, pred)
    return {
        "ebt_dpred": relative_error(ebt_grad(pred, gt, params).dvalues, numeric_ebt),
        "wbce_dpred": relative_error(wbce_grad(pred, gt, params.lam, params.epsilon).dvalues, numeric_wbce),
    }


def check_weight_grads(image: np.ndarray, gt: np.ndarray, weights: ModelWeights, params: LossParams) -> Dict[str, float]:
    features = featurize(image)
    errors = {}
    for kind in (LossKind.WBCE, LossKind.EBT):
        _, analytic = weight_grad(features, weights, gt, params, kind)
        numeric = finite_difference(lambda w: weight_grad(features, ModelWeights(w), gt, params, kind)[0], weights.w)
        errors[f"{kind.value}_dweights"] = relative_error(analytic, numeric)
    return errors


def run_suite(seed: int, size: int, instances: int = 5, params: LossParams = LossParams()) -> List[CheckResult]:
    """Worst relative error per check over `instances` random problems."""
    rng = np.random.default_rng(seed)
    worst: Dict[str, float] = {}
    for _ in range(instances):
        pred, gt = random_instance(rng, size)
        image = rng.random((size, size))
        weights = ModelWeights(rng.normal(0.0, 0.5, size=K))
        errors = {**check_prediction_grads(pred, gt, params), **check_weight_grads(image, gt, weights, params)}
        for name, err in errors.items():
            worst[name] = max(worst.get(name, 0.0), err)
    results = [CheckResult(name, err) for name, err in sorted(worst.items())]
    for r in results:
        logger.info("%s max relative error %.3e", r.name, r.max_rel_error)
    return results
