"""
Strict edge-map evaluation: tolerance-based one-to-one correspondence between
predicted and ground-truth edge pixels, then ODS / OIS / AP over a threshold
sweep.

Two pixels are matchable iff their Euclidean distance is at most the
tolerance, so a 1-pixel tolerance accepts exact hits and 4-neighbours but not
diagonals.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Set, Tuple

import numpy as np
import pandas as pd
from scipy.optimize import linear_sum_assignment
from scipy.spatial import cKDTree
from sklearn.metrics import auc
from tqdm import tqdm

import config
from ebt.errors import ShapeError, UsageError
from ebt.regions import as_binary_map

logger = logging.getLogger(__name__)

# Squared distances are integers; the slack absorbs a tolerance typed as e.g. sqrt(2).
_DIST_SLACK = 1e-9


def uniform_thresholds(n: int = config.N_THRESHOLDS) -> Tuple[float, ...]:
    """n evenly spaced thresholds strictly inside (0, 1); 99 gives 0.01 ... 0.99."""
    if n < 1:
        raise UsageError(f"Need at least one threshold, got {n}")
    return tuple(i / (n + 1) for i in range(1, n + 1))


@dataclass(frozen=True)
class EvalConfig:
    tolerance: float = config.TOLERANCE
    thresholds: Tuple[float, ...] = field(default_factory=uniform_thresholds)

    def __post_init__(self):
        if self.tolerance < 0:
            raise UsageError(f"Tolerance must be nonnegative, got {self.tolerance}")
        ts = np.asarray(self.thresholds, dtype=np.float64)
        if ts.size == 0:
            raise UsageError("Threshold list is empty")
        if np.any(ts <= 0) or np.any(ts >= 1):
            raise UsageError("Thresholds must lie strictly inside (0, 1)")
        if np.any(np.diff(ts) <= 0):
            raise UsageError("Thresholds must be strictly increasing")
        object.__setattr__(self, "thresholds", tuple(float(t) for t in ts))


@dataclass(frozen=True)
class MatchCounts:
    matched_pred: int
    unmatched_pred: int
    matched_gt: int
    unmatched_gt: int

    @property
    def n_pred(self) -> int:
        return self.matched_pred + self.unmatched_pred

    @property
    def n_gt(self) -> int:
        return self.matched_gt + self.unmatched_gt


@dataclass
class EvalReport:
    per_threshold: List[Tuple[float, float, float, float]]
    ods: float
    ods_threshold: float
    ois: float
    ap: float
    # (best threshold, best f1) per image, in input order
    per_image_best: List[Tuple[float, float]] = field(default_factory=list)
    # best mean of per-image F1 at one threshold shared by all images; OIS >= this
    shared_mean_f1: float = 0.0


def _ratio(num: float, den: float) -> float:
    return float(num) / float(den) if den else 0.0


def _f1(precision: float, recall: float) -> float:
    return _ratio(2.0 * precision * recall, precision + recall)


def _candidate_pairs(
    pred_pts: np.ndarray,
    gt_pts: np.ndarray,
    tolerance: float,
    gt_tree: Optional[cKDTree] = None,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """All matchable (pred, gt) index pairs with their squared distances."""
    if len(pred_pts) == 0 or len(gt_pts) == 0:
        empty = np.zeros(0, dtype=np.int64)
        return empty, empty, empty
    if gt_tree is None:
        gt_tree = cKDTree(gt_pts)
    neighbours = cKDTree(pred_pts).query_ball_tree(gt_tree, r=tolerance + _DIST_SLACK)

    pi = np.repeat(np.arange(len(pred_pts)), [len(n) for n in neighbours])
    gi = np.fromiter((g for n in neighbours for g in n), dtype=np.int64, count=len(pi))
    d2 = ((pred_pts[pi] - gt_pts[gi]) ** 2).sum(axis=1)
    keep = d2 <= tolerance * tolerance + _DIST_SLACK
    return pi[keep], gi[keep], d2[keep]


def _augment(
    start: int,
    adjacency: List[List[int]],
    match_from: np.ndarray,
    match_to: np.ndarray,
    visited: Set[int],
) -> bool:
    """Search an alternating path from a free vertex and flip it if found.

    Vertices reached by a failed search stay in ``visited``; they cannot lead to
    a free vertex until the matching changes.
    """
    stack = [(start, iter(adjacency[start]))]
    via: List[int] = []
    while stack:
        _, candidates = stack[-1]
        for g in candidates:
            if g in visited:
                continue
            visited.add(g)
            if match_to[g] < 0:
                for (pp, _), gg in zip(stack, via + [g]):
                    match_from[pp] = gg
                    match_to[gg] = pp
                return True
            via.append(g)
            nxt = int(match_to[g])
            stack.append((nxt, iter(adjacency[nxt])))
            break
        else:
            stack.pop()
            if via:
                via.pop()
    return False


def _match_points(
    pred_pts: np.ndarray,
    gt_pts: np.ndarray,
    tolerance: float,
    gt_tree: Optional[cKDTree] = None,
) -> MatchCounts:
    n_pred, n_gt = len(pred_pts), len(gt_pts)
    pi, gi, d2 = _candidate_pairs(pred_pts, gt_pts, tolerance, gt_tree)

    match_pred = np.full(n_pred, -1, dtype=np.int64)
    match_gt = np.full(n_gt, -1, dtype=np.int64)
    adj_pred: List[List[int]] = [[] for _ in range(n_pred)]
    adj_gt: List[List[int]] = [[] for _ in range(n_gt)]

    # greedy pass: nearest pairs first, row-major pred then gt on ties
    for k in np.lexsort((gi, pi, d2)):
        p, g = int(pi[k]), int(gi[k])
        adj_pred[p].append(g)
        adj_gt[g].append(p)
        if match_pred[p] < 0 and match_gt[g] < 0:
            match_pred[p] = g
            match_gt[g] = p

    # augmenting paths lift the greedy matching to maximum cardinality,
    # searched from whichever side has fewer free matchable pixels
    free_pred = [p for p in range(n_pred) if match_pred[p] < 0 and adj_pred[p]]
    free_gt = [g for g in range(n_gt) if match_gt[g] < 0 and adj_gt[g]]
    if len(free_gt) < len(free_pred):
        starts, adjacency, match_from, match_to = free_gt, adj_gt, match_gt, match_pred
    else:
        starts, adjacency, match_from, match_to = free_pred, adj_pred, match_pred, match_gt
    visited: Set[int] = set()
    for s in starts:
        if _augment(s, adjacency, match_from, match_to, visited):
            visited.clear()

    matched = int(np.count_nonzero(match_pred >= 0))
    return MatchCounts(
        matched_pred=matched,
        unmatched_pred=n_pred - matched,
        matched_gt=matched,
        unmatched_gt=n_gt - matched,
    )


def _check_same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"Prediction shape {a.shape} does not match ground truth {b.shape}")


def match_maps(pred_bin, gt, tolerance: float = config.TOLERANCE) -> MatchCounts:
    """One-to-one matching of predicted to gt edge pixels within `tolerance` pixels."""
    pred_bin = as_binary_map(pred_bin)
    gt = as_binary_map(gt)
    _check_same_shape(pred_bin, gt)
    return _match_points(np.argwhere(pred_bin == 1), np.argwhere(gt == 1), tolerance)


def max_matching_oracle(pred_bin, gt, tolerance: float = config.TOLERANCE) -> int:
    """Maximum-cardinality matching size via a 0/1-cost assignment over all pairs."""
    pred_bin = as_binary_map(pred_bin)
    gt = as_binary_map(gt)
    _check_same_shape(pred_bin, gt)
    pred_pts, gt_pts = np.argwhere(pred_bin == 1), np.argwhere(gt == 1)
    if len(pred_pts) == 0 or len(gt_pts) == 0:
        return 0
    d2 = ((pred_pts[:, None, :] - gt_pts[None, :, :]) ** 2).sum(axis=2)
    matchable = d2 <= tolerance * tolerance + _DIST_SLACK
    rows, cols = linear_sum_assignment(np.where(matchable, 0, 1))
    return int(matchable[rows, cols].sum())


def pr_at_threshold(pred, gt, t: float, tolerance: float = config.TOLERANCE) -> Tuple[float, float, float]:
    """(precision, recall, F1) of one map binarized at pred >= t."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = as_binary_map(gt)
    _check_same_shape(pred, gt)
    counts = match_maps((pred >= t).astype(np.uint8), gt, tolerance)
    precision = _ratio(counts.matched_pred, counts.n_pred)
    recall = _ratio(counts.matched_gt, counts.n_gt)
    return precision, recall, _f1(precision, recall)


def _image_counts(pred: np.ndarray, gt: np.ndarray, thresholds: Sequence[float], tolerance: float) -> np.ndarray:
    """Rows of (matched_pred, n_pred, matched_gt, n_gt), one per threshold."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = as_binary_map(gt)
    _check_same_shape(pred, gt)
    gt_pts = np.argwhere(gt == 1)
    gt_tree = cKDTree(gt_pts) if len(gt_pts) else None

    rows = np.zeros((len(thresholds), 4), dtype=np.int64)
    for i, t in enumerate(thresholds):
        c = _match_points(np.argwhere(pred >= t), gt_pts, tolerance, gt_tree)
        rows[i] = (c.matched_pred, c.n_pred, c.matched_gt, c.n_gt)
    return rows


def _prf(counts: np.ndarray) -> Tuple[float, float, float]:
    precision = _ratio(counts[0], counts[1])
    recall = _ratio(counts[2], counts[3])
    return precision, recall, _f1(precision, recall)


def average_precision(precision: Sequence[float], recall: Sequence[float]) -> float:
    """
    Area under the precision envelope, integrated by trapezoids over recall.
    The curve is extended to recall 0 at the envelope's maximum precision.
    """
    precision = np.asarray(precision, dtype=np.float64)
    recall = np.asarray(recall, dtype=np.float64)
    if precision.size == 0:
        return 0.0
    order = np.argsort(recall, kind="stable")
    r = recall[order]
    envelope = np.maximum.accumulate(precision[order][::-1])[::-1]
    r = np.concatenate(([0.0], r))
    envelope = np.concatenate(([envelope.max()], envelope))
    return float(np.clip(auc(r, envelope), 0.0, 1.0))


def evaluate_dataset(
    preds: Sequence[np.ndarray],
    gts: Sequence[np.ndarray],
    cfg: EvalConfig = EvalConfig(),
    max_workers: int = config.MAX_WORKERS,
    show_progress: bool = False,
) -> EvalReport:
    """
    Dataset scores over `cfg.thresholds`. ODS is the F1 of the counts pooled
    over all images at the best shared threshold, while OIS averages each
    image's own best F1, so a dataset dominated by one large image can score
    ODS above OIS.
    """
    if len(preds) == 0:
        raise UsageError("Cannot evaluate an empty dataset")
    if len(preds) != len(gts):
        raise UsageError(f"Got {len(preds)} predictions but {len(gts)} ground-truth maps")

    thresholds = cfg.thresholds
    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        jobs = pool.map(lambda pair: _image_counts(pair[0], pair[1], thresholds, cfg.tolerance), zip(preds, gts))
        # map keeps input order, so the fold below is deterministic
        per_image = list(tqdm(jobs, total=len(preds), desc="Evaluating", unit="img", disable=not show_progress))

    pooled = np.sum(per_image, axis=0)
    per_threshold = [(t,) + _prf(pooled[i]) for i, t in enumerate(thresholds)]

    f1s = np.array([row[3] for row in per_threshold])
    best = int(np.argmax(f1s))

    # (n_images, n_thresholds)
    image_f1 = np.array([[_prf(row)[2] for row in counts] for counts in per_image])
    best_k = np.argmax(image_f1, axis=1)
    per_image_best: List[Tuple[float, float]] = [
        (thresholds[k], float(image_f1[i, k])) for i, k in enumerate(best_k)
    ]
    ois = float(np.mean([f for _, f in per_image_best]))

    ap = average_precision([row[1] for row in per_threshold], [row[2] for row in per_threshold])
    logger.debug("ODS=%.6f at t=%.2f OIS=%.6f AP=%.6f", f1s[best], thresholds[best], ois, ap)

    return EvalReport(
        per_threshold=per_threshold,
        ods=float(f1s[best]),
        ods_threshold=float(thresholds[best]),
        ois=ois,
        ap=ap,
        per_image_best=per_image_best,
        shared_mean_f1=float(image_f1.mean(axis=0).max()),
    )


def report_to_frame(report: EvalReport) -> pd.DataFrame:
    return pd.DataFrame(report.per_threshold, columns=["threshold", "precision", "recall", "f1"])


def summary_line(report: EvalReport) -> str:
    return (
        f"# ods={report.ods:.6f},ods_threshold={report.ods_threshold:.6f},"
        f"ois={report.ois:.6f},ap={report.ap:.6f}"
    )


def write_report_csv(report: EvalReport, path: str) -> None:
    """One row per threshold with 6 fractional digits, then a `#` summary line."""
    frame = report_to_frame(report)
    with open(path, "w", encoding="utf-8", newline="") as f:
        frame.to_csv(f, index=False, float_format="%.6f", lineterminator="\n")
        f.write(summary_line(report) + "\n")


def read_report_csv(path: str) -> Tuple[pd.DataFrame, Dict[str, float]]:
    """Inverse of write_report_csv: the threshold table and the summary values."""
    frame = pd.read_csv(path, comment="#")
    summary: Dict[str, float] = {}
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            if line.startswith("#"):
                for item in line[1:].strip().split(","):
                    key, value = item.split("=")
                    summary[key.strip()] = float(value)
    return frame, summary
