#!/usr/bin/env python3
"""
Command-line entry point for the EBT loss experiments.

Subcommands: regions, loss, eval, train, infer, sweep, gradcheck, synth.
Every subcommand accepts `--config FILE` (key=value lines, `#` comments);
explicit flags override the file, the file overrides the built-in defaults.
Ground-truth images are binarized at level > 127.
"""

import argparse
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from tqdm import tqdm

import config
from ebt.datapipe import (
    PatchPlan,
    SampleSet,
    SynthSpec,
    binarize_levels,
    default_crop_size,
    expand_training_set,
    load_prediction,
    load_prediction_dir,
    load_sample_set,
    patch_infer,
    read_gray,
    save_prediction,
    save_sample_set,
    synth_dataset,
    write_gray,
)
from ebt.errors import EbtError, UsageError
from ebt.evaluator import EvalConfig, EvalReport, evaluate_dataset, uniform_thresholds, write_report_csv
from ebt.gradcheck import REL_TOL, run_suite
from ebt.losses import LossKind, LossParams, bce, ebt, wbce
from ebt.regions import class_weights, classify, visualize
from ebt.toymodel import ModelWeights, load_weights, predict, save_weights, train

logger = logging.getLogger("ebt.cli")

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_USAGE = 2

SWEEP_B_B = (0.4, 0.6, 0.8, 1.0, 1.2)
SWEEP_B_T = (0.1, 0.3, 0.5, 0.7, 0.9)
SWEEP_COLUMNS = ["b_e", "b_b", "b_t", "ods", "ois", "ap"]
EVAL_COUNT = 8


@dataclass
class RunConfig:
    loss: LossParams
    eval: EvalConfig
    loss_kind: LossKind = LossKind.EBT
    seed: int = config.SEED
    epochs: int = config.EPOCHS
    lr: float = config.LEARNING_RATE
    weight_decay: float = config.WEIGHT_DECAY
    batch_size: int = config.BATCH_SIZE
    crop: Optional[int] = 0  # None: pick from the training images
    count: int = config.SYNTH_COUNT
    eval_count: int = EVAL_COUNT
    patch: int = config.PATCH_SIZE
    stride: int = config.PATCH_STRIDE
    grid_b_b: Tuple[float, ...] = SWEEP_B_B
    grid_b_t: Tuple[float, ...] = SWEEP_B_T
    data: Optional[str] = None
    out: Optional[str] = None
    synth_size: int = config.SYNTH_SIZE
    min_shapes: int = config.SYNTH_MIN_SHAPES
    max_shapes: int = config.SYNTH_MAX_SHAPES
    noise: float = config.SYNTH_NOISE
    show_progress: bool = True

    def synth_spec(self, seed: Optional[int] = None) -> SynthSpec:
        """Synthetic canvas for `seed`, the run seed when omitted."""
        return SynthSpec(
            seed=self.seed if seed is None else seed,
            height=self.synth_size,
            width=self.synth_size,
            min_shapes=self.min_shapes,
            max_shapes=self.max_shapes,
            noise=self.noise,
        )


def parse_float_list(text: str) -> Tuple[float, ...]:
    try:
        values = tuple(float(v) for v in str(text).split(",") if v.strip())
    except ValueError:
        raise UsageError(f"Expected a comma-separated list of numbers, got {text!r}")
    if not values:
        raise UsageError("Grid list is empty")
    return values


def parse_thresholds(text: str) -> Tuple[float, ...]:
    """`N` for N uniform thresholds, or an explicit comma-separated list."""
    text = str(text).strip()
    if "," not in text and "." not in text:
        try:
            return uniform_thresholds(int(text))
        except ValueError:
            raise UsageError(f"Expected a threshold count or list, got {text!r}")
    return parse_float_list(text)


def parse_crop(text) -> Optional[int]:
    """`auto` or a non-negative side; 0 disables cropping."""
    text = str(text).strip().lower()
    if text == "auto":
        return None
    try:
        size = int(text)
    except ValueError:
        raise UsageError(f"Expected a crop size or 'auto', got {text!r}")
    if size < 0:
        raise UsageError(f"Crop size must be non-negative, got {size}")
    return size


def parse_loss_kind(text: str) -> LossKind:
    try:
        return LossKind(str(text).strip().lower())
    except ValueError:
        raise UsageError(f"Unknown loss {text!r}; choose from {[k.value for k in LossKind]}")


def _pick(args: argparse.Namespace, file_values: Dict[str, Any], key: str, default: Any) -> Any:
    value = getattr(args, key, None)
    if value is not None:
        return value
    return file_values.get(key, default)


def build_run_config(args: argparse.Namespace) -> RunConfig:
    file_values = config.load_config_file(getattr(args, "config", None))

    loss = LossParams(
        b_e=_pick(args, file_values, "b_e", config.B_E),
        b_b=_pick(args, file_values, "b_b", config.B_B),
        b_t=_pick(args, file_values, "b_t", config.B_T),
        r=_pick(args, file_values, "r", config.RADIUS),
        lam=_pick(args, file_values, "lambda", config.LAMBDA),
        epsilon=_pick(args, file_values, "epsilon", config.EPSILON),
    )
    thresholds = _pick(args, file_values, "thresholds", None)
    eval_cfg = EvalConfig(
        tolerance=_pick(args, file_values, "tolerance", config.TOLERANCE),
        thresholds=parse_thresholds(thresholds) if thresholds is not None else uniform_thresholds(),
    )
    seed = _pick(args, file_values, "seed", config.SEED)
    grid_b_b = _pick(args, file_values, "grid_b_b", None)
    grid_b_t = _pick(args, file_values, "grid_b_t", None)

    return RunConfig(
        loss=loss,
        eval=eval_cfg,
        loss_kind=parse_loss_kind(_pick(args, file_values, "loss", LossKind.EBT.value)),
        seed=seed,
        epochs=_pick(args, file_values, "epochs", config.EPOCHS),
        lr=_pick(args, file_values, "lr", config.LEARNING_RATE),
        weight_decay=_pick(args, file_values, "weight_decay", config.WEIGHT_DECAY),
        batch_size=_pick(args, file_values, "batch_size", config.BATCH_SIZE),
        crop=parse_crop(_pick(args, file_values, "crop", 0)),
        count=_pick(args, file_values, "count", config.SYNTH_COUNT),
        eval_count=_pick(args, file_values, "eval_count", EVAL_COUNT),
        patch=_pick(args, file_values, "patch", config.PATCH_SIZE),
        stride=_pick(args, file_values, "stride", config.PATCH_STRIDE),
        grid_b_b=parse_float_list(grid_b_b) if grid_b_b is not None else SWEEP_B_B,
        grid_b_t=parse_float_list(grid_b_t) if grid_b_t is not None else SWEEP_B_T,
        data=_pick(args, file_values, "data", None),
        out=_pick(args, file_values, "out", None),
        synth_size=_pick(args, file_values, "size", config.SYNTH_SIZE),
        min_shapes=_pick(args, file_values, "min_shapes", config.SYNTH_MIN_SHAPES),
        max_shapes=_pick(args, file_values, "max_shapes", config.SYNTH_MAX_SHAPES),
        noise=_pick(args, file_values, "noise", config.SYNTH_NOISE),
        show_progress=not getattr(args, "quiet", False),
    )


def _require(value: Optional[str], flag: str) -> str:
    if not value:
        raise UsageError(f"{flag} is required")
    return value


def quantize(values: np.ndarray) -> np.ndarray:
    """The 8-bit levels a map survives being written to disk with."""
    return np.rint(np.clip(values, 0.0, 1.0) * 255) / 255.0


def training_set(run: RunConfig, augment: bool = False) -> SampleSet:
    if run.data:
        samples = load_sample_set(run.data)
    else:
        samples = synth_dataset(run.synth_spec(), run.count, run.show_progress)
        samples = SampleSet([quantize(img) for img in samples.images], samples.gts, samples.ids)
    if augment:
        samples = expand_training_set(samples)
    return samples


def crop_size(run: RunConfig, samples: SampleSet) -> int:
    if run.crop is not None:
        return run.crop
    size = default_crop_size([img.shape for img in samples.images])
    logger.info("Using %d-pixel training crops", size)
    return size


def held_out_set(run: RunConfig) -> SampleSet:
    """Synthetic scenes seeded right after the training scenes."""
    samples = synth_dataset(run.synth_spec(run.seed + run.count), run.eval_count, False)
    return SampleSet([quantize(img) for img in samples.images], samples.gts, samples.ids)


def infer_image(weights: ModelWeights, image: np.ndarray, patch: int, stride: int) -> np.ndarray:
    plan = PatchPlan.for_image(image.shape[0], image.shape[1], patch, stride)
    return patch_infer(lambda tile: predict(tile, weights), image, plan)


def evaluate_weights(weights: ModelWeights, samples: SampleSet, run: RunConfig) -> EvalReport:
    preds = [quantize(infer_image(weights, img, run.patch, run.stride)) for img in samples.images]
    return evaluate_dataset(preds, samples.gts, run.eval)


# =========================
# Subcommands
# =========================

def cmd_regions(run: RunConfig, gt_path: str, out_path: Optional[str]) -> int:
    gt = binarize_levels(read_gray(gt_path))
    mask = classify(gt, run.loss.r)
    weights = class_weights(mask)
    if out_path:
        write_gray(visualize(mask), out_path)
    w_e, w_b, w_t = weights.as_floats()
    print(f"counts: E={mask.count_e} B={mask.count_b} T={mask.count_t} (r={mask.radius_used})")
    print(f"weights: w_e={w_e:.6f} w_b={w_b:.6f} w_t={w_t:.6f}")
    return EXIT_OK


def cmd_loss(run: RunConfig, pred_path: str, gt_path: str) -> int:
    pred = load_prediction(pred_path)
    gt = binarize_levels(read_gray(gt_path))
    results = {
        "bce": bce(pred, gt, run.loss.epsilon),
        "wbce": wbce(pred, gt, run.loss.lam, run.loss.epsilon),
        "ebt": ebt(pred, gt, run.loss),
    }
    for name, value in results.items():
        parts = " ".join(f"{c:.6f}" for c in value.per_class_contribution)
        print(f"{name}={value.value:.6f} contributions=[{parts}]")
    return EXIT_OK


def cmd_eval(run: RunConfig, pred_dir: str, gt_dir: str, out_csv: Optional[str]) -> int:
    preds, gts, stems = load_prediction_dir(pred_dir, gt_dir)
    report = evaluate_dataset(preds, gts, run.eval, show_progress=run.show_progress)
    if out_csv:
        os.makedirs(os.path.dirname(os.path.abspath(out_csv)), exist_ok=True)
        write_report_csv(report, out_csv)
    print(f"ODS={report.ods:.6f} OIS={report.ois:.6f} AP={report.ap:.6f}")
    return EXIT_OK


def cmd_train(run: RunConfig, augment: bool = False) -> int:
    out = Path(_require(run.out, "--out"))
    samples = training_set(run, augment)
    record = train(
        samples.pairs(),
        run.loss_kind,
        run.loss,
        epochs=run.epochs,
        seed=run.seed,
        lr=run.lr,
        weight_decay=run.weight_decay,
        batch_size=run.batch_size,
        crop_size=crop_size(run, samples),
        show_progress=run.show_progress,
    )
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / f"train_{run.loss_kind.value}.csv"
    record.to_frame().to_csv(csv_path, index=False, float_format="%.10f", lineterminator="\n")
    save_weights(record.weights, str(out / f"weights_{run.loss_kind.value}.txt"))
    print(f"trained {run.loss_kind.value} on {len(samples)} images for {run.epochs} epochs, "
          f"final loss {record.losses[-1]:.6f}")
    print(f"wrote {csv_path}")
    return EXIT_OK


def cmd_infer(run: RunConfig, weights_path: str, image_dir: str) -> int:
    weights = load_weights(weights_path)
    out = Path(_require(run.out, "--out")) / "pred"
    folder = Path(image_dir)
    if not folder.is_dir():
        raise FileNotFoundError(f"Missing directory: {folder}")
    paths = sorted(p for p in folder.iterdir() if p.suffix.lower() == ".png")
    if not paths:
        raise UsageError(f"No .png images in {folder}")
    for path in tqdm(paths, desc="Inferring", unit="img", disable=not run.show_progress):
        image = read_gray(path).astype(np.float64) / 255.0
        save_prediction(infer_image(weights, image, run.patch, run.stride), out / f"{path.stem}.png")
    print(f"wrote {len(paths)} predictions to {out}")
    return EXIT_OK


def run_sweep(run: RunConfig) -> pd.DataFrame:
    """Train and score one model per (B_B, B_T) cell with B_E fixed."""
    if not run.grid_b_b or not run.grid_b_t:
        raise UsageError("Sweep grid is empty")
    train_samples = training_set(run)
    test_samples = load_sample_set(run.data) if run.data else held_out_set(run)
    crop = crop_size(run, train_samples)

    rows = []
    cells = [(b_b, b_t) for b_b in run.grid_b_b for b_t in run.grid_b_t]
    for b_b, b_t in tqdm(cells, desc="Sweep", unit="cell", disable=not run.show_progress):
        params = LossParams(b_e=run.loss.b_e, b_b=b_b, b_t=b_t, r=run.loss.r, lam=run.loss.lam, epsilon=run.loss.epsilon)
        record = train(
            train_samples.pairs(),
            LossKind.EBT,
            params,
            epochs=run.epochs,
            seed=run.seed,
            lr=run.lr,
            weight_decay=run.weight_decay,
            batch_size=run.batch_size,
            crop_size=crop,
        )
        report = evaluate_weights(record.weights, test_samples, run)
        logger.info("B_B=%.2f B_T=%.2f ODS=%.6f OIS=%.6f AP=%.6f", b_b, b_t, report.ods, report.ois, report.ap)
        rows.append((params.b_e, b_b, b_t, report.ods, report.ois, report.ap))
    return pd.DataFrame(rows, columns=SWEEP_COLUMNS)


def cmd_sweep(run: RunConfig) -> int:
    out = Path(_require(run.out, "--out"))
    frame = run_sweep(run)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "sweep.csv"
    frame.to_csv(csv_path, index=False, float_format="%.6f", lineterminator="\n")
    spread = frame["ods"].max() - frame["ods"].min()
    print(f"{len(frame)} configurations, ODS range {frame['ods'].min():.6f}-{frame['ods'].max():.6f} "
          f"(spread {spread:.6f})")
    print(f"wrote {csv_path}")
    return EXIT_OK


def cmd_gradcheck(run: RunConfig, size: int) -> int:
    results = run_suite(run.seed, size, params=run.loss)
    for r in results:
        print(f"{r.name}: max relative error {r.max_rel_error:.3e} {'ok' if r.passed else 'FAIL'}")
    worst = max(r.max_rel_error for r in results)
    print(f"max relative error {worst:.3e} (limit {REL_TOL:.0e})")
    return EXIT_OK if worst <= REL_TOL else EXIT_FAILED


def cmd_synth(run: RunConfig) -> int:
    out = Path(_require(run.out, "--out"))
    samples = synth_dataset(run.synth_spec(), run.count, run.show_progress)
    save_sample_set(samples, out)
    print(f"wrote {len(samples)} synthetic samples to {out}")
    return EXIT_OK


# =========================
# Argument parsing
# =========================

def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value run file; flags override it")
    p.add_argument("--seed", type=int)
    p.add_argument("--quiet", action="store_true", help="Hide progress bars")
    p.add_argument("--verbose", action="store_true", help="Debug logging")


def _add_loss(p: argparse.ArgumentParser) -> None:
    p.add_argument("--r", type=int, help=f"Boundary window radius (default {config.RADIUS})")
    p.add_argument("--b-e", dest="b_e", type=float, help=f"Edge weight B_E (default {config.B_E})")
    p.add_argument("--b-b", dest="b_b", type=float, help=f"Boundary weight B_B (default {config.B_B})")
    p.add_argument("--b-t", dest="b_t", type=float, help=f"Texture weight B_T (default {config.B_T})")
    p.add_argument("--lambda", dest="lambda", type=float, help=f"WBCE balance (default {config.LAMBDA})")
    p.add_argument("--epsilon", type=float, help=f"Log clamp (default {config.EPSILON})")


def _add_eval(p: argparse.ArgumentParser) -> None:
    p.add_argument("--tolerance", type=float, help=f"Match distance in pixels (default {config.TOLERANCE})")
    p.add_argument("--thresholds", help=f"N uniform thresholds or a comma list (default {config.N_THRESHOLDS})")


def _add_train(p: argparse.ArgumentParser) -> None:
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float, help=f"Adam learning rate (default {config.LEARNING_RATE})")
    p.add_argument("--weight-decay", dest="weight_decay", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int, help="0 = full batch")
    p.add_argument("--crop", help=f"Random crop side, 0 = none, auto = {config.CROP_SIZE} or {config.DESK_CROP_SIZE} as the images allow (default 0)")
    p.add_argument("--data", help="Dataset root with images/ and edges/; synthetic when omitted")
    p.add_argument("--count", type=int, help="Number of synthetic training scenes")
    p.add_argument("--size", type=int, help="Synthetic canvas side")


def _add_patch(p: argparse.ArgumentParser) -> None:
    p.add_argument("--patch", type=int, help=f"Patch side (default {config.PATCH_SIZE})")
    p.add_argument("--stride", type=int, help=f"Patch stride (default {config.PATCH_STRIDE})")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ebt", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("regions", help="Classify a gt map into edge/boundary/texture")
    _add_common(p)
    _add_loss(p)
    p.add_argument("--gt", required=True, help="Ground-truth image (levels > 127 are edges)")
    p.add_argument("--out", help="Where to write the 3-level visualization")

    p = sub.add_parser("loss", help="BCE, WBCE and EBT of a prediction image")
    _add_common(p)
    _add_loss(p)
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)

    p = sub.add_parser("eval", help="ODS/OIS/AP of a prediction directory")
    _add_common(p)
    _add_eval(p)
    p.add_argument("--pred-dir", required=True)
    p.add_argument("--gt-dir", required=True)
    p.add_argument("--out", help="CSV report path")

    p = sub.add_parser("train", help="Train the toy model with WBCE or EBT")
    _add_common(p)
    _add_loss(p)
    _add_train(p)
    p.add_argument("--loss", choices=[k.value for k in LossKind])
    p.add_argument("--augment", action="store_true", help="Halving pyramid and 8-fold rotation/flip")
    p.add_argument("--out", help="Output directory for the loss CSV and weights")

    p = sub.add_parser("infer", help="Patchwise predictions for a directory of images")
    _add_common(p)
    _add_patch(p)
    p.add_argument("--weights", required=True)
    p.add_argument("--image-dir", required=True)
    p.add_argument("--out", help="Output root; predictions go to <out>/pred")

    p = sub.add_parser("sweep", help="(B_B, B_T) stability grid")
    _add_common(p)
    _add_loss(p)
    _add_eval(p)
    _add_train(p)
    _add_patch(p)
    p.add_argument("--grid-b-b", dest="grid_b_b", help="Comma list (default 0.4,0.6,0.8,1.0,1.2)")
    p.add_argument("--grid-b-t", dest="grid_b_t", help="Comma list (default 0.1,0.3,0.5,0.7,0.9)")
    p.add_argument("--eval-count", dest="eval_count", type=int, help="Held-out synthetic scenes")
    p.add_argument("--out", help="Output directory for sweep.csv")

    p = sub.add_parser("gradcheck", help="Finite-difference gradient checks")
    _add_common(p)
    _add_loss(p)
    p.add_argument("--size", dest="check_size", type=int, default=8, help="Side of the random test maps")

    p = sub.add_parser("synth", help="Write a synthetic dataset")
    _add_common(p)
    p.add_argument("--count", type=int)
    p.add_argument("--size", type=int)
    p.add_argument("--min-shapes", dest="min_shapes", type=int)
    p.add_argument("--max-shapes", dest="max_shapes", type=int)
    p.add_argument("--noise", type=float)
    p.add_argument("--out", help="Dataset root (images/ and edges/)")

    return parser


def dispatch(args: argparse.Namespace) -> int:
    run = build_run_config(args)
    if args.command == "regions":
        return cmd_regions(run, args.gt, run.out)
    if args.command == "loss":
        return cmd_loss(run, args.pred, args.gt)
    if args.command == "eval":
        return cmd_eval(run, args.pred_dir, args.gt_dir, run.out)
    if args.command == "train":
        return cmd_train(run, args.augment)
    if args.command == "infer":
        return cmd_infer(run, args.weights, args.image_dir)
    if args.command == "sweep":
        return cmd_sweep(run)
    if args.command == "gradcheck":
        return cmd_gradcheck(run, args.check_size)
    if args.command == "synth":
        return cmd_synth(run)
    raise UsageError(f"Unknown command {args.command}")


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        return dispatch(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (EbtError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
