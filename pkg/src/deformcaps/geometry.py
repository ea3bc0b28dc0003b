"""Center-point target encoding and peak decoding.

Boxes live in input-pixel coordinates; heatmaps and regression maps live on
the detection grid, ``d`` times coarser. A box's grid cell is
``floor(center / d)`` so offset targets fall in [0, 1).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

logger = logging.getLogger(__name__)

DEFAULT_MIN_IOU = 0.7
DEFAULT_THRESHOLD = 0.3
DEFAULT_TOP_N = 100


@dataclass(frozen=True)
class Box:
    x1: float
    y1: float
    x2: float
    y2: float
    class_id: int = 0

    def __post_init__(self):
        if not (self.x2 > self.x1 and self.y2 > self.y1):
            raise ValueError(f"degenerate box {self}")
        if self.class_id < 0:
            raise ValueError(f"negative class id in {self}")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))

    def as_array(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.x2, self.y2], dtype=np.float64)


@dataclass
class Heatmap:
    values: np.ndarray  # [K, H/d, W/d]
    d: int


@dataclass
class RegressionTargets:
    offsets: np.ndarray  # [2, h, w]: (dx, dy)
    sizes: np.ndarray  # [2, h, w]: (width, height) in pixels
    mask: np.ndarray  # [h, w] of {0, 1}
    P: int
    cells: np.ndarray  # [P, 2] (row, col) of each center, in box order
    objects: np.ndarray  # [P] index of the box owning each cell


@dataclass
class Detection:
    class_id: int
    score: float
    center: tuple[float, float]
    box: Box
    cell: tuple[int, int]
    mask: np.ndarray | None = None


def gaussian_radius(box_w: float, box_h: float, min_iou: float = DEFAULT_MIN_IOU) -> float:
    """Largest corner displacement keeping IoU >= ``min_iou``.

    Three displacement modes are solved in closed form: both corners shifted
    the same way, both pulled inward, both pushed outward. The smallest
    admissible displacement wins. Output is in the units of the inputs.
    """
    w, h, m = float(box_w), float(box_h), float(min_iou)
    # shifted: (w - r)(h - r) = 2m wh / (1 + m)
    b1 = w + h
    c1 = w * h * (1 - m) / (1 + m)
    r1 = (b1 - math.sqrt(max(b1 * b1 - 4 * c1, 0.0))) / 2
    # shrunk: (w - 2r)(h - 2r) = m wh
    b2 = 2 * (w + h)
    c2 = (1 - m) * w * h
    r2 = (b2 - math.sqrt(max(b2 * b2 - 16 * c2, 0.0))) / 8
    # grown: wh = m (w + 2r)(h + 2r)
    a3 = 4 * m
    b3 = 2 * m * (w + h)
    c3 = (m - 1) * w * h
    r3 = (-b3 + math.sqrt(b3 * b3 - 4 * a3 * c3)) / (2 * a3)
    return max(min(r1, r2, r3), 1e-6)


def _grid_dims(H: int, W: int, d: int) -> tuple[int, int]:
    if H % d or W % d:
        raise ValueError(f"image dims {H}x{W} not divisible by downsample factor {d}")
    return H // d, W // d


def _center_cell(box: Box, d: int, h: int, w: int, index: int) -> tuple[int, int, float, float]:
    cx, cy = box.center
    px, py = cx / d, cy / d
    col, row = math.floor(px), math.floor(py)
    if not (0 <= row < h and 0 <= col < w):
        raise ValueError(f"box {index} center ({cx:.2f}, {cy:.2f}) maps outside the {h}x{w} grid")
    return row, col, px, py


def encode_heatmap(boxes: Sequence[Box], K: int, H: int, W: int, d: int,
                   min_iou: float = DEFAULT_MIN_IOU) -> Heatmap:
    h, w = _grid_dims(H, W, d)
    values = np.zeros((K, h, w), dtype=np.float64)
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    for i, box in enumerate(boxes):
        if not 0 <= box.class_id < K:
            raise ValueError(f"box {i} class {box.class_id} outside [0, {K})")
        row, col, _, _ = _center_cell(box, d, h, w, i)
        sigma = gaussian_radius(box.width / d, box.height / d, min_iou) / 3.0
        splat = np.exp(-((xs - col) ** 2 + (ys - row) ** 2) / (2 * sigma * sigma))
        np.maximum(values[box.class_id], splat, out=values[box.class_id])
    return Heatmap(values, d)


def encode_regression(boxes: Sequence[Box], H: int, W: int, d: int) -> RegressionTargets:
    h, w = _grid_dims(H, W, d)
    offsets = np.zeros((2, h, w))
    sizes = np.zeros((2, h, w))
    mask = np.zeros((h, w))
    owner: dict[tuple[int, int], int] = {}
    for i, box in enumerate(boxes):
        row, col, px, py = _center_cell(box, d, h, w, i)
        if (row, col) in owner:
            logger.warning("boxes %d and %d share center cell (%d, %d); keeping %d",
                           owner[(row, col)], i, row, col, i)
        owner[(row, col)] = i
        offsets[:, row, col] = (px - col, py - row)
        sizes[:, row, col] = (box.width, box.height)
        mask[row, col] = 1.0
    cells = np.array(sorted(owner, key=owner.get), dtype=np.int64).reshape(-1, 2)
    objects = np.array(sorted(owner.values()), dtype=np.int64)
    return RegressionTargets(offsets, sizes, mask, len(owner), cells, objects)


def find_peaks(scores: np.ndarray, threshold: float) -> np.ndarray:
    """Cells that pass ``threshold`` and equal their zero-padded 3x3 max.

    Returns an int array [n, 3] of (class, row, col).
    """
    padded = np.pad(scores, ((0, 0), (1, 1), (1, 1)))
    local_max = sliding_window_view(padded, (3, 3), axis=(1, 2)).max(axis=(-1, -2))
    keep = (scores >= threshold) & (scores == local_max)
    return np.argwhere(keep)


def decode_detections(heatmap_pred, offsets: np.ndarray, sizes: np.ndarray,
                      threshold: float = DEFAULT_THRESHOLD, top_n: int = DEFAULT_TOP_N,
                      d: int | None = None) -> list[Detection]:
    if isinstance(heatmap_pred, Heatmap):
        scores, d = heatmap_pred.values, heatmap_pred.d
    else:
        scores = np.asarray(heatmap_pred)
        if d is None:
            raise ValueError("downsample factor d is required for a raw score array")
    peaks = find_peaks(scores, threshold)
    order = sorted(range(len(peaks)),
                   key=lambda n: (-scores[tuple(peaks[n])], peaks[n][1], peaks[n][2], peaks[n][0]))
    dets = []
    for n in order[:top_n]:
        k, row, col = (int(v) for v in peaks[n])
        cx = (col + offsets[0, row, col]) * d
        cy = (row + offsets[1, row, col]) * d
        bw = max(float(sizes[0, row, col]), 1e-3)
        bh = max(float(sizes[1, row, col]), 1e-3)
        box = Box(cx - bw / 2, cy - bh / 2, cx + bw / 2, cy + bh / 2, k)
        dets.append(Detection(k, float(scores[k, row, col]), (float(cx), float(cy)), box, (row, col)))
    return dets


def box_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between [n, 4] and [m, 4] xyxy arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ix1 = np.maximum(a[:, None, 0], b[None, :, 0])
    iy1 = np.maximum(a[:, None, 1], b[None, :, 1])
    ix2 = np.minimum(a[:, None, 2], b[None, :, 2])
    iy2 = np.minimum(a[:, None, 3], b[None, :, 3])
    inter = np.clip(ix2 - ix1, 0, None) * np.clip(iy2 - iy1, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1), 0.0)
