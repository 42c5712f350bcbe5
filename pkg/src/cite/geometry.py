"""Bounding-box arithmetic and spatial location encoders.

Boxes are closed real-coordinate rectangles; area is (x_max-x_min) *
(y_max-y_min) with no +1 pixel convention.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import kernels
from .errors import ValidationError


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box in pixel coordinates."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if not (self.x_min <= self.x_max and self.y_min <= self.y_max):
            raise ValidationError(
                f"invalid box: ({self.x_min}, {self.y_min}, {self.x_max}, {self.y_max})"
            )

    @property
    def w(self) -> float:
        return self.x_max - self.x_min

    @property
    def h(self) -> float:
        return self.y_max - self.y_min

    @property
    def x_center(self) -> float:
        return 0.5 * (self.x_min + self.x_max)

    @property
    def y_center(self) -> float:
        return 0.5 * (self.y_min + self.y_max)

    @property
    def area(self) -> float:
        return self.w * self.h

    def as_array(self) -> np.ndarray:
        return np.array([self.x_min, self.y_min, self.x_max, self.y_max], dtype=np.float64)

    @staticmethod
    def from_array(arr) -> "BBox":
        x1, y1, x2, y2 = (float(v) for v in arr)
        return BBox(x1, y1, x2, y2)


@dataclass(frozen=True)
class ImageSize:
    """Image width and height in pixels, both strictly positive."""

    W: float
    H: float

    def __post_init__(self):
        if self.W <= 0 or self.H <= 0:
            raise ValidationError(f"image size must be positive, got {self.W}x{self.H}")


def boxes_to_array(boxes: Iterable[BBox]) -> np.ndarray:
    """Stack boxes into an (n, 4) float array."""
    rows = [b.as_array() for b in boxes]
    if not rows:
        return np.zeros((0, 4), dtype=np.float64)
    return np.stack(rows)


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union; 0 when the union has zero area."""
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    union = a.area + b.area - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IOU between two (n, 4) / (m, 4) box arrays."""
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    if a.ndim != 2 or a.shape[1] != 4 or b.ndim != 2 or b.shape[1] != 4:
        raise ValidationError("iou_matrix expects (n, 4) box arrays")
    return kernels.iou_matrix(a, b)


def union_box(boxes: Sequence[BBox]) -> BBox:
    """Coordinate-wise min/max envelope of a non-empty list of boxes."""
    if not boxes:
        raise ValidationError("union_box needs at least one box")
    return BBox(
        min(b.x_min for b in boxes),
        min(b.y_min for b in boxes),
        max(b.x_max for b in boxes),
        max(b.y_max for b in boxes),
    )


def clamp_box(b: BBox, size: ImageSize) -> BBox:
    """Clamp a box to image bounds (proposal generators may overshoot)."""
    x1 = min(max(b.x_min, 0.0), size.W)
    x2 = min(max(b.x_max, 0.0), size.W)
    y1 = min(max(b.y_min, 0.0), size.H)
    y2 = min(max(b.y_max, 0.0), size.H)
    return BBox(x1, y1, x2, y2)


def encode_spatial_flickr(b: BBox, size: ImageSize) -> np.ndarray:
    """5-d location feature: [x_min/W, y_min/H, x_max/W, y_max/H, wh/WH]."""
    b = clamp_box(b, size)
    return np.array(
        [
            b.x_min / size.W,
            b.y_min / size.H,
            b.x_max / size.W,
            b.y_max / size.H,
            (b.w * b.h) / (size.W * size.H),
        ],
        dtype=np.float64,
    )


def encode_spatial_referit(b: BBox, size: ImageSize) -> np.ndarray:
    """8-d location feature [x_min, y_min, x_max, y_max, x_center, y_center,
    w, h], each normalized by the matching image dimension."""
    b = clamp_box(b, size)
    return np.array(
        [
            b.x_min / size.W,
            b.y_min / size.H,
            b.x_max / size.W,
            b.y_max / size.H,
            b.x_center / size.W,
            b.y_center / size.H,
            b.w / size.W,
            b.h / size.H,
        ],
        dtype=np.float64,
    )


SPATIAL_DIMS = {"none": 0, "flickr": 5, "referit": 8}


def encode_spatial(mode: str, b: BBox, size: ImageSize) -> np.ndarray:
    """Dispatch on the spatial encoding mode; 'none' gives an empty vector."""
    if mode == "none":
        return np.zeros(0, dtype=np.float64)
    if mode == "flickr":
        return encode_spatial_flickr(b, size)
    if mode == "referit":
        return encode_spatial_referit(b, size)
    raise ValidationError(f"unknown spatial encoding mode {mode!r}")
