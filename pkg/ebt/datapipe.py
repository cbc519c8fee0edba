"""
Image / ground-truth I/O, synthetic scenes with exact edges, the training
augmentations (halving pyramid, 8-fold rotation/flip, random crops) and
patchwise inference with overlap averaging.
"""

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image, ImageDraw
from tqdm import tqdm

import config
from ebt.errors import DimensionError, ShapeError, UsageError
from ebt.regions import as_binary_map

logger = logging.getLogger(__name__)

SHAPE_KINDS = ("rectangle", "circle", "polygon")
IMAGE_SUFFIXES = (".png", ".bmp", ".jpg", ".jpeg", ".tif", ".tiff", ".pgm")

Pair = Tuple[np.ndarray, np.ndarray]


@dataclass
class SampleSet:
    images: List[np.ndarray] = field(default_factory=list)
    gts: List[np.ndarray] = field(default_factory=list)
    ids: List[str] = field(default_factory=list)

    def add(self, image: np.ndarray, gt: np.ndarray, source_id: str) -> None:
        image = np.asarray(image, dtype=np.float64)
        gt = as_binary_map(gt)
        if image.shape != gt.shape:
            raise ShapeError(f"{source_id}: image shape {image.shape} does not match edges {gt.shape}")
        self.images.append(image)
        self.gts.append(gt)
        self.ids.append(source_id)

    def pairs(self) -> List[Pair]:
        return list(zip(self.images, self.gts))

    def __len__(self) -> int:
        return len(self.ids)


@dataclass(frozen=True)
class SynthSpec:
    seed: int = config.SEED
    height: int = config.SYNTH_SIZE
    width: int = config.SYNTH_SIZE
    min_shapes: int = config.SYNTH_MIN_SHAPES
    max_shapes: int = config.SYNTH_MAX_SHAPES
    kinds: Tuple[str, ...] = SHAPE_KINDS
    contrast: Tuple[float, float] = config.SYNTH_CONTRAST
    noise: float = config.SYNTH_NOISE

    def __post_init__(self):
        if self.height < 16 or self.width < 16:
            raise DimensionError(f"Synthetic canvas must be at least 16x16, got {self.height}x{self.width}")
        if not 0 <= self.min_shapes <= self.max_shapes:
            raise UsageError(f"Bad shape count range [{self.min_shapes}, {self.max_shapes}]")
        unknown = set(self.kinds) - set(SHAPE_KINDS)
        if unknown or not self.kinds:
            raise UsageError(f"Unknown shape kinds {sorted(unknown)}; choose from {SHAPE_KINDS}")
        lo, hi = self.contrast
        if not 0 < lo <= hi <= 1:
            raise UsageError(f"Contrast range must satisfy 0 < lo <= hi <= 1, got {self.contrast}")
        if self.noise < 0:
            raise UsageError(f"Noise level must be nonnegative, got {self.noise}")


@dataclass(frozen=True)
class PatchPlan:
    patch: int = config.PATCH_SIZE
    stride: int = config.PATCH_STRIDE
    # (row, col) top-left corners
    offsets: Tuple[Tuple[int, int], ...] = ()
    height: int = 0
    width: int = 0

    @classmethod
    def for_image(cls, height: int, width: int, patch: int = config.PATCH_SIZE,
                  stride: int = config.PATCH_STRIDE) -> "PatchPlan":
        if patch < 1 or stride < 1 or stride > patch:
            raise UsageError(f"Need 1 <= stride <= patch, got patch={patch} stride={stride}")

        def starts(extent: int) -> List[int]:
            if extent <= patch:
                return [0]
            out = list(range(0, extent - patch + 1, stride))
            if out[-1] + patch < extent:
                out.append(extent - patch)
            return out

        offsets = tuple((r, c) for r in starts(height) for c in starts(width))
        return cls(patch=patch, stride=stride, offsets=offsets, height=height, width=width)


# --- Synthetic scenes ---

def _shape_layers(kind: str, rng: np.random.Generator, h: int, w: int) -> Tuple[np.ndarray, np.ndarray]:
    """Filled region and its 1-pixel border trace for one random shape."""
    fill = Image.new("L", (w, h), 0)
    line = Image.new("L", (w, h), 0)
    draw_fill, draw_line = ImageDraw.Draw(fill), ImageDraw.Draw(line)

    if kind == "rectangle":
        bw = int(rng.integers(4, max(5, w // 2)))
        bh = int(rng.integers(4, max(5, h // 2)))
        x0 = int(rng.integers(1, max(2, w - bw - 1)))
        y0 = int(rng.integers(1, max(2, h - bh - 1)))
        box = [x0, y0, x0 + bw - 1, y0 + bh - 1]
        draw_fill.rectangle(box, fill=1)
        draw_line.rectangle(box, outline=1)
    elif kind == "circle":
        radius = int(rng.integers(3, max(4, min(h, w) // 4)))
        cx = int(rng.integers(radius + 1, w - radius - 1))
        cy = int(rng.integers(radius + 1, h - radius - 1))
        box = [cx - radius, cy - radius, cx + radius, cy + radius]
        draw_fill.ellipse(box, fill=1)
        draw_line.ellipse(box, outline=1)
    else:
        n = int(rng.integers(3, 7))
        cx = float(rng.uniform(w * 0.25, w * 0.75))
        cy = float(rng.uniform(h * 0.25, h * 0.75))
        angles = np.sort(rng.uniform(0, 2 * np.pi, size=n))
        radii = rng.uniform(3, min(h, w) * 0.25, size=n)
        pts = [(int(round(cx + r * np.cos(a))), int(round(cy + r * np.sin(a)))) for a, r in zip(angles, radii)]
        draw_fill.polygon(pts, fill=1)
        draw_line.polygon(pts, outline=1)

    fill_arr = np.asarray(fill, dtype=bool)
    line_arr = np.asarray(line, dtype=bool)
    return fill_arr | line_arr, line_arr


def _distinct_intensity(rng: np.random.Generator, used: List[float], contrast: Tuple[float, float]) -> float:
    lo, hi = contrast
    for _ in range(100):
        base = used[int(rng.integers(len(used)))]
        step = float(rng.uniform(lo, hi)) * (1 if rng.random() < 0.5 else -1)
        value = base + step
        if not 0 <= value <= 1:
            value = base - step
        if 0 <= value <= 1 and min(abs(value - u) for u in used) >= lo / 2:
            return value
    # fall back to the level farthest from every used intensity
    grid = np.linspace(0, 1, 101)
    gaps = np.min(np.abs(grid[:, None] - np.asarray(used)[None, :]), axis=1)
    return float(grid[np.argmax(gaps)])


def synth_scene(spec: SynthSpec) -> Pair:
    """
    Render filled shapes over a flat background. The ground truth is the
    border trace of each shape; later shapes hide what they cover.
    """
    rng = np.random.default_rng(spec.seed)
    h, w = spec.height, spec.width

    background = float(rng.uniform(0.1, 0.9))
    image = np.full((h, w), background)
    gt = np.zeros((h, w), dtype=np.uint8)
    used = [background]

    n_shapes = int(rng.integers(spec.min_shapes, spec.max_shapes + 1))
    for _ in range(n_shapes):
        kind = spec.kinds[int(rng.integers(len(spec.kinds)))]
        region, trace = _shape_layers(kind, rng, h, w)
        intensity = _distinct_intensity(rng, used, spec.contrast)
        used.append(intensity)
        image[region] = intensity
        gt[region] = 0
        gt[trace] = 1

    if spec.noise > 0:
        image = np.clip(image + rng.normal(0.0, spec.noise, size=image.shape), 0.0, 1.0)
    return image, gt


def synth_dataset(spec: SynthSpec, count: int = config.SYNTH_COUNT, show_progress: bool = False) -> SampleSet:
    """`count` scenes seeded spec.seed, spec.seed + 1, ..."""
    samples = SampleSet()
    for i in tqdm(range(count), desc="Synthesizing", unit="img", disable=not show_progress):
        image, gt = synth_scene(replace(spec, seed=spec.seed + i))
        samples.add(image, gt, f"synth_{spec.seed + i:05d}")
    return samples


# --- Augmentation ---

def _halve(image: np.ndarray, gt: np.ndarray) -> Pair:
    # odd sides are edge-padded so no row or column is dropped
    pad = ((0, image.shape[0] % 2), (0, image.shape[1] % 2))
    image, gt = np.pad(image, pad, mode="edge"), np.pad(gt, pad, mode="edge")
    h, w = image.shape
    img = image.reshape(h // 2, 2, w // 2, 2).mean(axis=(1, 3))
    lab = gt.reshape(h // 2, 2, w // 2, 2).max(axis=(1, 3))
    return img, (lab > 0).astype(np.uint8)


def halving_pyramid(image, gt, bound: int = config.PYRAMID_BOUND) -> List[Pair]:
    """
    The original pair plus 2x2-mean / 2x2-max halvings. A level is produced
    from the previous one only while the new level keeps a side >= bound.
    """
    image = np.asarray(image, dtype=np.float64)
    gt = as_binary_map(gt)
    levels = [(image, gt)]
    while max(levels[-1][0].shape) // 2 >= bound:
        levels.append(_halve(*levels[-1]))
    return levels


def augment_8(image, gt) -> List[Pair]:
    """Rotations by 0/90/180/270 degrees, each with and without a horizontal flip."""
    image = np.asarray(image)
    gt = as_binary_map(gt)
    out = []
    for k in range(4):
        rot_img, rot_gt = np.rot90(image, k), np.rot90(gt, k)
        out.append((rot_img.copy(), rot_gt.copy()))
        out.append((np.fliplr(rot_img).copy(), np.fliplr(rot_gt).copy()))
    return out


def random_crop(image, gt, size: int, seed: int) -> Pair:
    """Seeded uniform crop; smaller inputs are reflect-padded up to size first."""
    image = np.asarray(image, dtype=np.float64)
    gt = as_binary_map(gt)
    if image.shape != gt.shape:
        raise ShapeError(f"Image shape {image.shape} does not match edges {gt.shape}")
    if size < 1:
        raise UsageError(f"Crop size must be positive, got {size}")

    pad_h, pad_w = max(0, size - image.shape[0]), max(0, size - image.shape[1])
    if pad_h or pad_w:
        pad = ((0, pad_h), (0, pad_w))
        # symmetric keeps 1-row images valid where "reflect" would not
        image = np.pad(image, pad, mode="symmetric")
        gt = np.pad(gt, pad, mode="symmetric")

    rng = np.random.default_rng(seed)
    top = int(rng.integers(0, image.shape[0] - size + 1))
    left = int(rng.integers(0, image.shape[1] - size + 1))
    return image[top:top + size, left:left + size], gt[top:top + size, left:left + size]


def default_crop_size(shapes: Sequence[Tuple[int, int]]) -> int:
    """Largest of CROP_SIZE and DESK_CROP_SIZE that fits every image, else 0."""
    side = min(min(shape) for shape in shapes)
    for size in (config.CROP_SIZE, config.DESK_CROP_SIZE):
        if side >= size:
            return size
    return 0


def expand_training_set(samples: SampleSet, pyramid: bool = True, augment: bool = True) -> SampleSet:
    out = SampleSet()
    for image, gt, source_id in zip(samples.images, samples.gts, samples.ids):
        levels = halving_pyramid(image, gt) if pyramid else [(image, gt)]
        for li, (img, lab) in enumerate(levels):
            variants = augment_8(img, lab) if augment else [(img, lab)]
            for vi, (v_img, v_gt) in enumerate(variants):
                out.add(v_img, v_gt, f"{source_id}_l{li}_a{vi}")
    return out


# --- Patchwise inference ---

def patch_infer(
    predict_fn: Callable[[np.ndarray], np.ndarray],
    image,
    plan: Optional[PatchPlan] = None,
    max_workers: int = 1,
) -> np.ndarray:
    """Predict each patch and average the predictions wherever patches overlap."""
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape
    if plan is None:
        plan = PatchPlan.for_image(h, w)
    if (plan.height, plan.width) != (h, w):
        raise ShapeError(f"Patch plan is for {plan.height}x{plan.width}, image is {h}x{w}")

    p = plan.patch
    pad_h, pad_w = max(0, p - h), max(0, p - w)
    padded = np.pad(image, ((0, pad_h), (0, pad_w)), mode="symmetric") if (pad_h or pad_w) else image

    def run(offset: Tuple[int, int]) -> np.ndarray:
        r, c = offset
        tile = padded[r:r + p, c:c + p]
        out = np.asarray(predict_fn(tile), dtype=np.float64)
        if out.shape != tile.shape:
            raise ShapeError(f"predict_fn returned {out.shape} for a {tile.shape} patch")
        return out

    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        tiles = list(pool.map(run, plan.offsets))

    total = np.zeros(padded.shape)
    hits = np.zeros(padded.shape)
    for (r, c), tile in zip(plan.offsets, tiles):
        total[r:r + p, c:c + p] += tile
        hits[r:r + p, c:c + p] += 1
    if np.any(hits[:h, :w] == 0):
        raise ShapeError("Patch plan leaves pixels uncovered")
    return total[:h, :w] / hits[:h, :w]


# --- Files ---

def _list_images(folder: Path) -> List[Path]:
    return sorted(p for p in folder.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def read_gray(path) -> np.ndarray:
    """8-bit grayscale file as integer levels 0..255."""
    try:
        with Image.open(path) as img:
            return np.asarray(img.convert("L"), dtype=np.uint8)
    except (OSError, ValueError) as e:
        raise OSError(f"Cannot read image {path}: {e}")


def binarize_levels(levels: np.ndarray, level: int = config.GT_LEVEL) -> np.ndarray:
    return (np.asarray(levels) > level).astype(np.uint8)


def write_gray(levels: np.ndarray, path) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    Image.fromarray(np.asarray(levels, dtype=np.uint8)).save(path)


def load_sample(image_path, gt_path, source_id: Optional[str] = None) -> SampleSet:
    image = read_gray(image_path).astype(np.float64) / 255.0
    gt = binarize_levels(read_gray(gt_path))
    samples = SampleSet()
    samples.add(image, gt, source_id or Path(image_path).stem)
    return samples


def load_sample_set(root) -> SampleSet:
    """Load `<root>/images/*` and `<root>/edges/*` paired by file stem."""
    root = Path(root)
    images_dir, edges_dir = root / "images", root / "edges"
    for folder in (images_dir, edges_dir):
        if not folder.is_dir():
            raise FileNotFoundError(f"Missing directory: {folder}")

    images = {p.stem: p for p in _list_images(images_dir)}
    edges = {p.stem: p for p in _list_images(edges_dir)}
    if set(images) != set(edges):
        missing = sorted(set(images) ^ set(edges))
        raise UsageError(f"images/ and edges/ stems differ: {missing[:10]}")
    if not images:
        raise UsageError(f"No images found under {root}")

    samples = SampleSet()
    for stem in sorted(images):
        loaded = load_sample(images[stem], edges[stem], stem)
        samples.add(loaded.images[0], loaded.gts[0], stem)
    return samples


def save_sample_set(samples: SampleSet, root) -> None:
    root = Path(root)
    for image, gt, source_id in zip(samples.images, samples.gts, samples.ids):
        write_gray(np.rint(np.clip(image, 0, 1) * 255), root / "images" / f"{source_id}.png")
        write_gray(gt * 255, root / "edges" / f"{source_id}.png")


def save_prediction(pred: np.ndarray, path) -> None:
    """Write probabilities as 8-bit grayscale round(p * 255)."""
    write_gray(np.rint(np.clip(pred, 0, 1) * 255), path)


def load_prediction(path) -> np.ndarray:
    return read_gray(path).astype(np.float64) / 255.0


def load_prediction_dir(pred_dir, gt_dir) -> Tuple[List[np.ndarray], List[np.ndarray], List[str]]:
    """Prediction maps and binarized ground truths paired by file stem."""
    pred_dir, gt_dir = Path(pred_dir), Path(gt_dir)
    for folder in (pred_dir, gt_dir):
        if not folder.is_dir():
            raise FileNotFoundError(f"Missing directory: {folder}")
    preds = {p.stem: p for p in _list_images(pred_dir)}
    gts = {p.stem: p for p in _list_images(gt_dir)}
    if not preds:
        raise UsageError(f"No prediction files in {pred_dir}")
    if set(preds) != set(gts):
        missing = sorted(set(preds) ^ set(gts))
        raise UsageError(f"Prediction and ground-truth stems differ: {missing[:10]}")

    stems = sorted(preds)
    pred_maps, gt_maps = [], []
    for stem in stems:
        pred = load_prediction(preds[stem])
        gt = binarize_levels(read_gray(gts[stem]))
        if pred.shape != gt.shape:
            raise ShapeError(f"{stem}: prediction {pred.shape} vs ground truth {gt.shape}")
        pred_maps.append(pred)
        gt_maps.append(gt)
    return pred_maps, gt_maps, stems
