"""Synthetic shapes, COCO-style annotation loading, augmentation, PPM I/O.

Every sample carries one 28x28 binary mask per box: the object's full-image
mask cropped to its box and resampled with nearest neighbour.
"""

from __future__ import annotations

import json
import logging
import math
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from scipy import ndimage

from .geometry import Box
from .numerics import make_rng

logger = logging.getLogger(__name__)

MASK_SIDE = 28
SHAPE_NAMES = ("disk", "square", "triangle")
MIN_SIDE = 2.0


@dataclass
class Sample:
    image: np.ndarray  # [3, H, W] in [0, 1]
    boxes: list[Box]
    masks: list[np.ndarray]  # one [28, 28] {0, 1} array per box

    def __post_init__(self):
        if len(self.boxes) != len(self.masks):
            raise ValueError(f"{len(self.boxes)} boxes but {len(self.masks)} masks")


@dataclass
class DatasetSpec:
    kind: str = "synthetic"
    seed: int = 0
    size: int = 2000
    start: int = 0
    image_size: int = 64
    K: int = 3
    min_objects: int = 1
    max_objects: int = 4
    min_side: int = 10
    max_side: int = 22
    flip_prob: float = 0.0
    scale_range: tuple[float, float] = (1.0, 1.0)
    color_jitter: float = 0.0
    path: str = ""

    def __post_init__(self):
        self.scale_range = tuple(float(v) for v in self.scale_range)
        if self.kind not in ("synthetic", "coco_json"):
            raise ValueError(f"unknown dataset kind {self.kind!r}")
        if self.kind == "synthetic" and not 1 <= self.K <= len(SHAPE_NAMES):
            raise ValueError(f"synthetic data supports K in [1, {len(SHAPE_NAMES)}], got {self.K}")

    @property
    def augments(self) -> bool:
        return self.flip_prob > 0 or self.scale_range != (1.0, 1.0) or self.color_jitter > 0


# ---------------------------------------------------------------------------
# masks

def normalize_mask(full_mask: np.ndarray, box: Box, side: int = MASK_SIDE) -> np.ndarray:
    """Crop ``full_mask`` to ``box`` and nearest-neighbour resample to side x side."""
    H, W = full_mask.shape
    x1, y1 = max(int(math.floor(box.x1)), 0), max(int(math.floor(box.y1)), 0)
    x2, y2 = min(int(math.ceil(box.x2)), W), min(int(math.ceil(box.y2)), H)
    crop = full_mask[y1:y2, x1:x2]
    rows = np.minimum(((np.arange(side) + 0.5) * crop.shape[0] / side).astype(int), crop.shape[0] - 1)
    cols = np.minimum(((np.arange(side) + 0.5) * crop.shape[1] / side).astype(int), crop.shape[1] - 1)
    return (crop[np.ix_(rows, cols)] > 0).astype(np.float64)


def rasterize_polygon(xy: Sequence[float], H: int, W: int) -> np.ndarray:
    """Even-odd fill of a flat [x0, y0, x1, y1, ...] polygon at pixel centers."""
    pts = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
    px, py = np.meshgrid(np.arange(W) + 0.5, np.arange(H) + 0.5)
    inside = np.zeros((H, W), dtype=bool)
    xj, yj = pts[-1]
    for xi, yi in pts:
        crosses = (yi > py) != (yj > py)
        with np.errstate(divide="ignore", invalid="ignore"):
            x_at = (xj - xi) * (py - yi) / (yj - yi) + xi
        inside ^= crosses & (px < x_at)
        xj, yj = xi, yi
    return inside


def _tight_box(mask: np.ndarray, class_id: int) -> Box:
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    return Box(float(cols[0]), float(rows[0]), float(cols[-1] + 1), float(rows[-1] + 1), class_id)


# ---------------------------------------------------------------------------
# synthetic shapes

def _shape_mask(kind: int, cx: float, cy: float, side: float, H: int, W: int, flip_v: bool) -> np.ndarray:
    px, py = np.meshgrid(np.arange(W) + 0.5, np.arange(H) + 0.5)
    half = side / 2
    if kind == 0:
        return (px - cx) ** 2 + (py - cy) ** 2 <= half * half
    if kind == 1:
        return (np.abs(px - cx) <= half) & (np.abs(py - cy) <= half)
    apex, base = (cy + half, cy - half) if flip_v else (cy - half, cy + half)
    verts = [cx, apex, cx + half, base, cx - half, base]
    return rasterize_polygon(verts, H, W)


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    base = rng.uniform(0.2, 0.8, size=3)
    y, x = np.mgrid[0:size, 0:size] / size
    img = np.empty((3, size, size))
    for ch in range(3):
        fx, fy = rng.uniform(1.0, 4.0, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        wave = np.sin(2 * np.pi * (fx * x + fy * y) + phase)
        img[ch] = base[ch] + 0.08 * wave + rng.normal(0.0, 0.03, size=(size, size))
    return img


def synthetic_sample(spec: DatasetSpec, index: int) -> Sample:
    """Sample ``index`` of the synthetic stream; a pure function of (seed, index)."""
    rng = make_rng([spec.seed, index])
    S = spec.image_size
    image = _background(rng, S)
    n_obj = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    boxes: list[Box] = []
    masks: list[np.ndarray] = []
    taken = np.zeros((S, S), dtype=bool)
    cells: set[tuple[int, int]] = set()
    attempts = 0
    while len(boxes) < n_obj and attempts < 100:
        attempts += 1
        kind = int(rng.integers(0, spec.K))
        side = float(rng.integers(spec.min_side, spec.max_side + 1))
        lo, hi = side / 2 + 1, S - side / 2 - 1
        cx, cy = rng.uniform(lo, hi, size=2)
        flip_v = bool(rng.integers(0, 2))
        mask = _shape_mask(kind, cx, cy, side, S, S, flip_v)
        if mask.sum() < 4:
            continue
        box = _tight_box(mask, kind)
        bx1, by1 = int(box.x1) - 1, int(box.y1) - 1
        if taken[max(by1, 0):int(box.y2) + 1, max(bx1, 0):int(box.x2) + 1].any():
            continue
        bcx, bcy = box.center
        cell = (int(bcy // 4), int(bcx // 4))
        if cell in cells:
            continue
        color = rng.uniform(0.0, 1.0, size=3)
        bg = image[:, mask].mean(axis=1)
        if np.abs(color - bg).sum() < 0.6:
            color = np.where(bg > 0.5, bg - 0.45, bg + 0.45)
        image[:, mask] = color[:, None] + rng.normal(0.0, 0.02, size=(3, int(mask.sum())))
        taken[int(box.y1):int(box.y2), int(box.x1):int(box.x2)] = True
        cells.add(cell)
        boxes.append(box)
        masks.append(normalize_mask(mask, box))
    return Sample(np.clip(image, 0.0, 1.0), boxes, masks)


def generate_synthetic(spec: DatasetSpec) -> Iterator[Sample]:
    for i in range(spec.start, spec.start + spec.size):
        yield synthetic_sample(spec, i)


# ---------------------------------------------------------------------------
# augmentation

def _flip(sample: Sample) -> Sample:
    W = sample.image.shape[-1]
    boxes = [Box(W - b.x2, b.y1, W - b.x1, b.y2, b.class_id) for b in sample.boxes]
    masks = [m[:, ::-1].copy() for m in sample.masks]
    return Sample(sample.image[:, :, ::-1].copy(), boxes, masks)


def _rescale(sample: Sample, s: float) -> Sample:
    _, H, W = sample.image.shape
    cy, cx = H / 2, W / 2
    fill = sample.image.mean(axis=(1, 2))
    # output pixel center q maps back to input (q - c) / s + c
    matrix = np.diag([1 / s, 1 / s])
    offset = np.array([(0.5 - cy) / s + cy - 0.5, (0.5 - cx) / s + cx - 0.5])
    image = np.stack([ndimage.affine_transform(ch, matrix, offset=offset, order=1, mode="constant", cval=f)
                      for ch, f in zip(sample.image, fill)])
    boxes, masks = [], []
    for b, m in zip(sample.boxes, sample.masks):
        sx1, sx2 = (b.x1 - cx) * s + cx, (b.x2 - cx) * s + cx
        sy1, sy2 = (b.y1 - cy) * s + cy, (b.y2 - cy) * s + cy
        nx1, nx2 = max(sx1, 0.0), min(sx2, float(W))
        ny1, ny2 = max(sy1, 0.0), min(sy2, float(H))
        if nx2 - nx1 < MIN_SIDE or ny2 - ny1 < MIN_SIDE:
            continue
        if (nx1, ny1, nx2, ny2) != (sx1, sy1, sx2, sy2):
            # keep only the visible part of the box-normalized mask
            side = m.shape[0]
            c0 = int(math.floor((nx1 - sx1) / (sx2 - sx1) * side))
            c1 = int(math.ceil((nx2 - sx1) / (sx2 - sx1) * side))
            r0 = int(math.floor((ny1 - sy1) / (sy2 - sy1) * side))
            r1 = int(math.ceil((ny2 - sy1) / (sy2 - sy1) * side))
            sub = m[r0:r1, c0:c1]
            if not sub.any():
                continue
            m = normalize_mask(sub, Box(0, 0, sub.shape[1], sub.shape[0]), side)
        boxes.append(Box(nx1, ny1, nx2, ny2, b.class_id))
        masks.append(m)
    return Sample(image, boxes, masks)


def augment(sample: Sample, spec: DatasetSpec, rng: np.random.Generator) -> Sample:
    """Random horizontal flip, scale jitter about the image center, color jitter."""
    flip_draw = rng.uniform()
    scale = rng.uniform(*spec.scale_range) if spec.scale_range[0] != spec.scale_range[1] else spec.scale_range[0]
    gains = rng.uniform(-spec.color_jitter, spec.color_jitter, size=3) if spec.color_jitter > 0 else None
    out = sample
    if flip_draw < spec.flip_prob:
        out = _flip(out)
    if scale != 1.0:
        out = _rescale(out, scale)
    if gains is not None:
        out = replace(out, image=np.clip(out.image * (1.0 + gains[:, None, None]), 0.0, 1.0))
    return out


# ---------------------------------------------------------------------------
# COCO-style annotations

class CocoFormatError(ValueError):
    """Annotation file is unreadable or violates the expected schema."""


@dataclass
class CocoEntry:
    image_id: int
    file_name: str
    width: int
    height: int
    boxes: list[Box] = field(default_factory=list)
    masks: list[np.ndarray] = field(default_factory=list)


@dataclass
class CocoIndex:
    entries: list[CocoEntry]
    categories: list[str]
    category_ids: list[int]
    skipped: Counter
    root: Path


def load_coco_annotations(path) -> CocoIndex:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise CocoFormatError(f"{path}: cannot read annotation file ({e.strerror})") from e
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise CocoFormatError(f"{path}:{e.lineno}:{e.colno}: {e.msg}") from e
    if not isinstance(doc, dict):
        raise CocoFormatError(f"{path}: top level must be an object")
    for key in ("images", "annotations", "categories"):
        if not isinstance(doc.get(key), list):
            raise CocoFormatError(f"{path}: field '{key}' missing or not a list")

    cat_ids = []
    names = {}
    for n, cat in enumerate(doc["categories"]):
        if not isinstance(cat, dict) or "id" not in cat:
            raise CocoFormatError(f"{path}: categories[{n}] lacks an 'id'")
        cat_ids.append(int(cat["id"]))
        names[int(cat["id"])] = str(cat.get("name", cat["id"]))
    cat_ids = sorted(set(cat_ids))
    remap = {cid: i for i, cid in enumerate(cat_ids)}

    entries: dict[int, CocoEntry] = {}
    for n, img in enumerate(doc["images"]):
        try:
            entries[int(img["id"])] = CocoEntry(int(img["id"]), str(img["file_name"]),
                                                int(img["width"]), int(img["height"]))
        except (KeyError, TypeError, ValueError) as e:
            raise CocoFormatError(f"{path}: images[{n}] is malformed ({e!r})") from e

    skipped: Counter = Counter()
    for ann in doc["annotations"]:
        if not isinstance(ann, dict):
            skipped["malformed"] += 1
            continue
        entry = entries.get(ann.get("image_id"))
        bbox = ann.get("bbox")
        if entry is None or ann.get("category_id") not in remap:
            skipped["unknown_reference"] += 1
            continue
        if ann.get("iscrowd", 0):
            skipped["crowd"] += 1
            continue
        if not (isinstance(bbox, list) and len(bbox) == 4 and all(isinstance(v, (int, float)) for v in bbox)):
            skipped["malformed"] += 1
            continue
        x, y, w, h = (float(v) for v in bbox)
        if w <= 0 or h <= 0:
            skipped["degenerate"] += 1
            continue
        box = Box(x, y, x + w, y + h, remap[ann["category_id"]])
        seg = ann.get("segmentation")
        if isinstance(seg, dict):
            skipped["rle"] += 1
            continue
        if isinstance(seg, list) and seg:
            full = np.zeros((entry.height, entry.width), dtype=bool)
            try:
                for poly in seg:
                    full |= rasterize_polygon(poly, entry.height, entry.width)
            except (TypeError, ValueError):
                skipped["malformed"] += 1
                continue
        else:
            full = np.zeros((entry.height, entry.width), dtype=bool)
            full[int(y):int(math.ceil(y + h)), int(x):int(math.ceil(x + w))] = True
            skipped["no_segmentation_box_mask"] += 1
        entry.boxes.append(box)
        entry.masks.append(normalize_mask(full, box))
    if skipped:
        logger.info("COCO load %s: %s", path, dict(skipped))
    ordered = [entries[k] for k in sorted(entries)]
    return CocoIndex(ordered, [names[c] for c in cat_ids], cat_ids, skipped, path.parent)


def coco_sample(index: CocoIndex, n: int, image_size: int) -> Sample:
    """Load entry ``n`` and resize it to a square ``image_size`` canvas."""
    entry = index.entries[n]
    image = read_ppm(index.root / entry.file_name)
    _, H, W = image.shape
    sy, sx = image_size / H, image_size / W
    image = np.stack([ndimage.zoom(ch, (sy, sx), order=1, grid_mode=True, mode="nearest") for ch in image])
    boxes, masks = [], []
    for b, m in zip(entry.boxes, entry.masks):
        x1, x2 = min(b.x1 * sx, image_size), min(b.x2 * sx, image_size)
        y1, y2 = min(b.y1 * sy, image_size), min(b.y2 * sy, image_size)
        if x2 - x1 >= MIN_SIDE and y2 - y1 >= MIN_SIDE:
            boxes.append(Box(x1, y1, x2, y2, b.class_id))
            masks.append(m)
    return Sample(np.clip(image[:, :image_size, :image_size], 0, 1), boxes, masks)


# ---------------------------------------------------------------------------
# PPM images

def read_ppm(path) -> np.ndarray:
    """Read a P6 (binary) or P3 (ASCII) PPM into [3, H, W] floats in [0, 1]."""
    raw = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError(f"{path}: truncated PPM header")
        tokens.append(raw[start:pos])
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if magic == b"P6":
        if maxval > 255:
            raise ValueError(f"{path}: 16-bit PPM is not supported")
        data = np.frombuffer(raw, dtype=np.uint8, offset=pos + 1)[: w * h * 3]
    elif magic == b"P3":
        data = np.array(raw[pos:].split()[: w * h * 3], dtype=np.float64)
    else:
        raise ValueError(f"{path}: not a PPM image (magic {magic!r})")
    if data.size != w * h * 3:
        raise ValueError(f"{path}: expected {w * h * 3} samples, found {data.size}")
    return data.reshape(h, w, 3).transpose(2, 0, 1).astype(np.float64) / maxval


def write_ppm(path, image: np.ndarray) -> None:
    img = np.clip(np.round(np.asarray(image).transpose(1, 2, 0) * 255), 0, 255).astype(np.uint8)
    h, w = img.shape[:2]
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + img.tobytes())
