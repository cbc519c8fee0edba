"""
A small differentiable edge classifier: a fixed filter bank followed by a
per-pixel logistic head, trained with hand-written backpropagation and Adam.

    p_i = sigmoid( sum_k w_k * feature_k(i) )
    dL/dw_k = sum_i dL/dp_i * p_i * (1 - p_i) * feature_k(i)
"""

import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from dotenv import dotenv_values
from scipy import ndimage
from scipy.special import expit
from tqdm import tqdm

import config
from ebt.datapipe import random_crop
from ebt.errors import NumericError, ShapeError, UsageError
from ebt.losses import LossKind, LossParams, loss_and_grad
from ebt.regions import TriClassMask, as_binary_map, classify

logger = logging.getLogger(__name__)

FILTER_BANK_ID = "sobel-lap-gauss12-v1"
WEIGHTS_FORMAT = "ebt-toymodel"
WEIGHTS_VERSION = 1

CHANNELS = (
    "grad_x",
    "grad_y",
    "grad_mag",
    "laplacian",
    "smooth_s1",
    "smooth_s2",
    "intensity",
    "bias",
)
K = len(CHANNELS)

SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]]) / 8.0
SOBEL_Y = SOBEL_X.T
LAPLACIAN = np.array([[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]])


def gaussian_kernel(sigma: float) -> np.ndarray:
    radius = int(math.ceil(3 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


GAUSS_S1 = gaussian_kernel(1.0)
GAUSS_S2 = gaussian_kernel(2.0)


@dataclass(frozen=True)
class FeatureStack:
    # (K, H, W), channel order as CHANNELS
    channels: np.ndarray

    @property
    def shape(self) -> Tuple[int, int]:
        return self.channels.shape[1:]


@dataclass(frozen=True)
class ModelWeights:
    w: np.ndarray
    bank: str = FILTER_BANK_ID

    def __post_init__(self):
        w = np.asarray(self.w, dtype=np.float64)
        if w.shape != (K,):
            raise ShapeError(f"Expected {K} weights, got shape {w.shape}")
        if not np.all(np.isfinite(w)):
            raise NumericError("Model weights must be finite")
        object.__setattr__(self, "w", w)

    @classmethod
    def zeros(cls) -> "ModelWeights":
        return cls(np.zeros(K))


@dataclass(frozen=True)
class OptimState:
    step: int
    m: np.ndarray
    v: np.ndarray
    lr: float = config.LEARNING_RATE
    weight_decay: float = config.WEIGHT_DECAY
    betas: Tuple[float, float] = config.ADAM_BETAS
    eps: float = config.ADAM_EPS

    @classmethod
    def fresh(cls, n: int = K, **kwargs) -> "OptimState":
        return cls(step=0, m=np.zeros(n), v=np.zeros(n), **kwargs)


@dataclass
class TrainRecord:
    losses: List[float]
    weights: ModelWeights
    seed: int
    loss_kind: LossKind
    skipped: List[int] = field(default_factory=list)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "epoch": np.arange(1, len(self.losses) + 1),
                "loss": self.losses,
            }
        )


def featurize(image) -> FeatureStack:
    """Fixed filter responses with replicate borders; no learned parameters."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2 or img.size == 0:
        raise ShapeError(f"Expected a non-empty 2-D image, got shape {img.shape}")

    gx = ndimage.correlate(img, SOBEL_X, mode="nearest")
    gy = ndimage.correlate(img, SOBEL_Y, mode="nearest")
    channels = np.stack(
        [
            gx,
            gy,
            np.hypot(gx, gy),
            ndimage.correlate(img, LAPLACIAN, mode="nearest"),
            ndimage.correlate(img, GAUSS_S1, mode="nearest"),
            ndimage.correlate(img, GAUSS_S2, mode="nearest"),
            img,
            np.ones_like(img),
        ]
    )
    return FeatureStack(channels=channels)


def forward(features: FeatureStack, weights: ModelWeights) -> np.ndarray:
    """Per-pixel sigmoid of the weighted channel sum."""
    if features.channels.shape[0] != weights.w.shape[0]:
        raise ShapeError(f"{features.channels.shape[0]} feature channels but {weights.w.shape[0]} weights")
    return expit(np.tensordot(weights.w, features.channels, axes=1))


def predict(image, weights: ModelWeights) -> np.ndarray:
    return forward(featurize(image), weights)


def weight_grad(
    features: FeatureStack,
    weights: ModelWeights,
    gt,
    params: LossParams = LossParams(),
    loss_kind: LossKind = LossKind.EBT,
    mask: Optional[TriClassMask] = None,
) -> Tuple[float, np.ndarray]:
    gt = as_binary_map(gt)
    if features.shape != gt.shape:
        raise ShapeError(f"Features {features.shape} do not match ground truth {gt.shape}")
    pred = forward(features, weights)
    loss, dpred = loss_and_grad(pred, gt, loss_kind, params, mask)
    dz = dpred.dvalues * pred * (1.0 - pred)
    grad = np.tensordot(features.channels, dz, axes=([1, 2], [0, 1]))
    return loss.value, grad


def adam_step(state: OptimState, weights: ModelWeights, gradient) -> Tuple[ModelWeights, OptimState]:
    """Adam with bias-corrected moments and decoupled weight decay."""
    g = np.asarray(gradient, dtype=np.float64)
    if g.shape != weights.w.shape or state.m.shape != g.shape:
        raise ShapeError(f"Gradient shape {g.shape} does not match weights {weights.w.shape}")
    if not np.all(np.isfinite(g)):
        raise NumericError(f"Non-finite gradient at step {state.step + 1}: {g}")

    beta1, beta2 = state.betas
    t = state.step + 1
    m = beta1 * state.m + (1.0 - beta1) * g
    v = beta2 * state.v + (1.0 - beta2) * (g * g)
    m_hat = m / (1.0 - beta1 ** t)
    v_hat = v / (1.0 - beta2 ** t)

    w = weights.w - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    w = w - state.lr * state.weight_decay * weights.w
    return replace(weights, w=w), replace(state, step=t, m=m, v=v)


@dataclass(frozen=True)
class ChannelScaling:
    """
    Per-channel shift and scale of the feature stack. Training steps Adam on
    u, with w_k = u_k / scale_k and the bias absorbing the shifts; the saved
    weights stay in raw filter units.
    """

    shift: np.ndarray
    scale: np.ndarray

    @classmethod
    def identity(cls) -> "ChannelScaling":
        return cls(np.zeros(K), np.ones(K))

    @classmethod
    def fit(cls, stacks: Sequence[FeatureStack]) -> "ChannelScaling":
        """Pixel mean and std per channel, pooled over `stacks`; the bias channel is left as is."""
        if not stacks:
            return cls.identity()
        total = np.zeros(K)
        squares = np.zeros(K)
        count = 0
        for stack in stacks:
            flat = stack.channels.reshape(K, -1)
            total += flat.sum(axis=1)
            squares += (flat * flat).sum(axis=1)
            count += flat.shape[1]
        mean = total / count
        var = np.maximum(squares / count - mean * mean, 0.0)
        live = var > 1e-12
        shift = np.where(live, mean, 0.0)
        scale = np.where(live, np.sqrt(var), 1.0)
        shift[-1], scale[-1] = 0.0, 1.0
        return cls(shift, scale)

    def to_weights(self, u: np.ndarray) -> ModelWeights:
        w = u / self.scale
        w[-1] = u[-1] - float(np.dot(w[:-1], self.shift[:-1]))
        return ModelWeights(w)

    def pull_back(self, grad_w: np.ndarray) -> np.ndarray:
        """Gradient with respect to u from the gradient with respect to w."""
        grad_u = (grad_w - self.shift * grad_w[-1]) / self.scale
        grad_u[-1] = grad_w[-1]
        return grad_u


@dataclass
class _Prepared:
    index: int
    features: FeatureStack
    gt: np.ndarray
    mask: TriClassMask


def _prepare(
    dataset: Sequence[Tuple[np.ndarray, np.ndarray]],
    indices: Sequence[int],
    r: int,
    crop_size: int,
    rng: Optional[np.random.Generator],
) -> List[_Prepared]:
    prepared = []
    for i in indices:
        image, gt = dataset[i]
        if crop_size:
            image, gt = random_crop(image, gt, crop_size, int(rng.integers(2 ** 31)))
        gt = as_binary_map(gt)
        if not gt.any():
            continue
        prepared.append(_Prepared(i, featurize(image), gt, classify(gt, r)))
    return prepared


def train(
    dataset: Sequence[Tuple[np.ndarray, np.ndarray]],
    loss_kind: LossKind = LossKind.EBT,
    params: LossParams = LossParams(),
    epochs: int = config.EPOCHS,
    seed: int = config.SEED,
    lr: float = config.LEARNING_RATE,
    weight_decay: float = config.WEIGHT_DECAY,
    batch_size: int = config.BATCH_SIZE,
    crop_size: int = 0,
    crop_every: int = config.CROP_RESAMPLE_EPOCHS,
    max_workers: int = config.MAX_WORKERS,
    standardize: bool = True,
    show_progress: bool = False,
) -> TrainRecord:
    """
    Train from zero weights. Deterministic in `seed`: the shuffling order and
    the crop offsets are all drawn from one generator.

    batch_size 0 means one full-batch step per epoch. With crop_size > 0 every
    image is re-cropped every `crop_every` epochs, and an epoch whose crops are
    all edge-free records a NaN loss and makes no update.

    With `standardize`, Adam runs on per-channel standardized coordinates
    fitted to the uncropped training images (see ChannelScaling).
    """
    if not dataset:
        raise UsageError("Training set is empty")
    if epochs < 1:
        raise UsageError(f"epochs must be at least 1, got {epochs}")
    loss_kind = LossKind(loss_kind)

    skipped = [i for i, (_, gt) in enumerate(dataset) if not as_binary_map(gt).any()]
    usable = sorted(set(range(len(dataset))) - set(skipped))
    if not usable:
        raise UsageError("Every training image has an edge-free ground truth")
    if skipped:
        logger.info("Skipping %d edge-free image(s): %s", len(skipped), skipped)

    rng = np.random.default_rng(seed)
    state = OptimState.fresh(lr=lr, weight_decay=weight_decay)
    losses: List[float] = []

    prepared = [] if crop_size else _prepare(dataset, usable, params.r, 0, None)
    scaling = ChannelScaling.identity()
    if standardize:
        stacks = [featurize(dataset[i][0]) for i in usable] if crop_size else [p.features for p in prepared]
        scaling = ChannelScaling.fit(stacks)
    coords = ModelWeights.zeros()
    weights = scaling.to_weights(coords.w)

    def evaluate(item: _Prepared, w: ModelWeights) -> Tuple[float, np.ndarray]:
        return weight_grad(item.features, w, item.gt, params, loss_kind, item.mask)

    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        for epoch in tqdm(range(epochs), desc=f"Training {loss_kind.value}", unit="epoch", disable=not show_progress):
            if crop_size and epoch % crop_every == 0:
                prepared = _prepare(dataset, usable, params.r, crop_size, rng)
            if not prepared:
                logger.warning("Epoch %d: every crop is edge-free, no update", epoch + 1)
                losses.append(float("nan"))
                continue

            order = rng.permutation(len(prepared))
            step = batch_size if batch_size else len(order)
            epoch_losses: List[float] = []
            for start in range(0, len(order), step):
                batch = [prepared[k] for k in order[start:start + step]]
                results = list(pool.map(lambda item: evaluate(item, weights), batch))
                grad = np.zeros(K)
                for value, g in results:
                    epoch_losses.append(value)
                    grad += g
                coords, state = adam_step(state, coords, scaling.pull_back(grad / len(batch)))
                weights = scaling.to_weights(coords.w)

            losses.append(float(np.mean(epoch_losses)))
            logger.debug("epoch %d %s loss %.8f", epoch + 1, loss_kind.value, losses[-1])

    return TrainRecord(losses=losses, weights=weights, seed=seed, loss_kind=loss_kind, skipped=skipped)


def smoothed(losses: Sequence[float], window: int = 5) -> np.ndarray:
    """Means over consecutive non-overlapping windows of `window` epochs; NaN epochs are left out."""
    series = pd.Series(np.asarray(losses, dtype=np.float64))
    return series.groupby(np.arange(len(series)) // window).mean().to_numpy()


def region_mean_probability(
    weights: ModelWeights,
    dataset: Sequence[Tuple[np.ndarray, np.ndarray]],
    r: int = config.RADIUS,
    region: str = "boundary",
) -> float:
    """Mean predicted probability over one tri-class region, pooled over all images."""
    total, count = 0.0, 0
    for image, gt in dataset:
        pred = predict(image, weights)
        cells = getattr(classify(gt, r), region)
        total += float(pred[cells].sum())
        count += int(cells.sum())
    return total / count if count else 0.0


def save_weights(weights: ModelWeights, path: str) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    lines = [
        f"format={WEIGHTS_FORMAT}",
        f"version={WEIGHTS_VERSION}",
        f"bank={weights.bank}",
        f"k={len(weights.w)}",
    ]
    lines += [f"{name}={float(value)!r}" for name, value in zip(CHANNELS, weights.w)]
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("\n".join(lines) + "\n")


def load_weights(path: str) -> ModelWeights:
    if not os.path.exists(path):
        raise FileNotFoundError(f"Weights file not found: {path}")
    record = {key.strip(): (value or "").strip() for key, value in dotenv_values(path).items()}

    if record.get("format") != WEIGHTS_FORMAT or record.get("version") != str(WEIGHTS_VERSION):
        raise UsageError(f"{path} is not a version {WEIGHTS_VERSION} {WEIGHTS_FORMAT} record")
    if record.get("bank") != FILTER_BANK_ID:
        raise UsageError(f"{path} was trained with filter bank {record.get('bank')!r}, expected {FILTER_BANK_ID!r}")
    if record.get("k") != str(K):
        raise UsageError(f"{path} declares k={record.get('k')}, expected {K}")
    try:
        w = np.array([float(record[name]) for name in CHANNELS])
    except KeyError as e:
        raise UsageError(f"{path} is missing weight {e}")
    except ValueError as e:
        raise UsageError(f"{path} has a malformed weight: {e}")
    return ModelWeights(w)
