"""
Tri-class pixel taxonomy of a ground-truth edge map.

Every pixel is EDGE (labelled 1), BOUNDARY (a non-edge pixel within Chebyshev
distance r of some edge pixel) or TEXTURE (everything else). Windows are
clipped at the image border, never padded.
"""

import logging
from dataclasses import dataclass
from enum import IntEnum
from fractions import Fraction
from typing import Tuple

import numpy as np
from scipy import ndimage

from ebt.errors import DimensionError, OracleSizeError, ShapeError, UsageError

logger = logging.getLogger(__name__)

ORACLE_MAX_PIXELS = 4096


class RegionClass(IntEnum):
    TEXTURE = 0
    BOUNDARY = 1
    EDGE = 2


# 8-bit levels used when a mask is rendered to an image.
REGION_LEVELS = {
    RegionClass.EDGE: 255,
    RegionClass.BOUNDARY: 128,
    RegionClass.TEXTURE: 0,
}


def as_binary_map(gt) -> np.ndarray:
    """Validate a ground-truth grid and return it as a uint8 {0,1} array."""
    arr = np.asarray(gt)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise DimensionError(f"Expected a non-empty 2-D grid, got shape {arr.shape}")
    if not np.isin(arr, (0, 1)).all():
        raise ShapeError("Ground-truth map must contain only 0 and 1")
    return arr.astype(np.uint8, copy=False)


@dataclass(frozen=True)
class TriClassMask:
    classes: np.ndarray
    count_e: int
    count_b: int
    count_t: int
    radius_used: int

    @classmethod
    def from_classes(cls, classes: np.ndarray, radius: int) -> "TriClassMask":
        classes = np.array(classes, dtype=np.uint8, copy=True)
        classes.setflags(write=False)
        return cls(
            classes=classes,
            count_e=int(np.count_nonzero(classes == RegionClass.EDGE)),
            count_b=int(np.count_nonzero(classes == RegionClass.BOUNDARY)),
            count_t=int(np.count_nonzero(classes == RegionClass.TEXTURE)),
            radius_used=int(radius),
        )

    @classmethod
    def from_levels(cls, image: np.ndarray, radius: int) -> "TriClassMask":
        """Rebuild a mask from its 3-level 8-bit rendering."""
        image = np.asarray(image)
        classes = np.full(image.shape, RegionClass.TEXTURE, dtype=np.uint8)
        classes[image >= 192] = RegionClass.EDGE
        classes[(image >= 64) & (image < 192)] = RegionClass.BOUNDARY
        return cls.from_classes(classes, radius)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.classes.shape

    @property
    def size(self) -> int:
        return int(self.classes.size)

    @property
    def edge(self) -> np.ndarray:
        return self.classes == RegionClass.EDGE

    @property
    def boundary(self) -> np.ndarray:
        return self.classes == RegionClass.BOUNDARY

    @property
    def texture(self) -> np.ndarray:
        return self.classes == RegionClass.TEXTURE

    def counts(self) -> Tuple[int, int, int]:
        return self.count_e, self.count_b, self.count_t


@dataclass(frozen=True)
class ClassWeights:
    """Per-image complement fractions. Kept as exact rationals so they sum to 2."""

    w_e: Fraction
    w_b: Fraction
    w_t: Fraction

    def as_floats(self) -> Tuple[float, float, float]:
        return float(self.w_e), float(self.w_b), float(self.w_t)


def _check_radius(r: int) -> int:
    if int(r) != r or r < 0:
        raise UsageError(f"Radius must be a nonnegative integer, got {r}")
    return int(r)


def classify(gt, r: int) -> TriClassMask:
    """Partition gt into EDGE / BOUNDARY / TEXTURE with a (2r+1)x(2r+1) window."""
    gt = as_binary_map(gt)
    r = _check_radius(r)

    edges = gt == 1
    # constant zero outside the image gives border clipping
    near = ndimage.maximum_filter(gt, size=2 * r + 1, mode="constant", cval=0).astype(bool)

    classes = np.full(gt.shape, RegionClass.TEXTURE, dtype=np.uint8)
    classes[near & ~edges] = RegionClass.BOUNDARY
    classes[edges] = RegionClass.EDGE
    return TriClassMask.from_classes(classes, r)


def classify_oracle(gt, r: int) -> TriClassMask:
    """Brute-force all-pairs Chebyshev scan. Only meant for validating classify."""
    gt = as_binary_map(gt)
    r = _check_radius(r)
    if gt.size > ORACLE_MAX_PIXELS:
        raise OracleSizeError(
            f"Oracle limited to {ORACLE_MAX_PIXELS} pixels, got {gt.shape[0]}x{gt.shape[1]}"
        )

    cells = np.argwhere(np.ones(gt.shape, dtype=bool))
    edge_coords = np.argwhere(gt == 1)
    classes = np.full(gt.size, RegionClass.TEXTURE, dtype=np.uint8)
    if len(edge_coords):
        # (cells, edges) Chebyshev distances
        cheb = np.abs(cells[:, None, :] - edge_coords[None, :, :]).max(axis=2)
        classes[(cheb <= r).any(axis=1)] = RegionClass.BOUNDARY
    classes[gt.ravel() == 1] = RegionClass.EDGE
    return TriClassMask.from_classes(classes.reshape(gt.shape), r)


def class_weights(mask: TriClassMask) -> ClassWeights:
    """Exact weights w_e=(B+T)/N, w_b=(E+T)/N, w_t=(E+B)/N; they sum to 2."""
    total = mask.size
    return ClassWeights(
        w_e=Fraction(mask.count_b + mask.count_t, total),
        w_b=Fraction(mask.count_e + mask.count_t, total),
        w_t=Fraction(mask.count_e + mask.count_b, total),
    )


def visualize(mask: TriClassMask) -> np.ndarray:
    """Render a mask as an 8-bit image: EDGE=255, BOUNDARY=128, TEXTURE=0."""
    out = np.zeros(mask.shape, dtype=np.uint8)
    for region, level in REGION_LEVELS.items():
        out[mask.classes == region] = level
    return out
