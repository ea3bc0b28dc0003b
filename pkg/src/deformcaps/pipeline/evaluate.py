"""COCO-protocol average precision and model loading for inference."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from ..geometry import Detection, box_iou, decode_detections
from ..head import SplitCapsDetector
from ..numerics import no_grad
from .checkpoint import CheckpointError, load_checkpoint
from .config import ConfigError, RunConfig, parse_config_text

IOU_THRESHOLDS = np.round(np.arange(0.5, 0.951, 0.05), 2)
RECALL_POINTS = np.linspace(0.0, 1.0, 101)


@dataclass
class EvalReport:
    AP: float
    AP50: float
    AP75: float
    per_class_AP: dict[int, float] = field(default_factory=dict)
    TP: int = 0
    FP: int = 0
    FN: int = 0

    def as_dict(self, class_names: Sequence[str] = ()) -> dict:
        per_class = {(class_names[k] if k < len(class_names) else str(k)): v
                     for k, v in sorted(self.per_class_AP.items())}
        return {"AP": self.AP, "AP50": self.AP50, "AP75": self.AP75, "per_class_AP": per_class,
                "TP": self.TP, "FP": self.FP, "FN": self.FN}


def greedy_match(det_boxes: np.ndarray, gt_boxes: np.ndarray, iou_threshold: float) -> np.ndarray:
    """Match score-ordered detections to ground truth; returns a TP flag per detection.

    Each detection takes the unmatched ground truth with highest IoU, provided
    that IoU reaches the threshold. ``det_boxes`` must already be in score order.
    """
    tp = np.zeros(len(det_boxes), dtype=bool)
    if len(det_boxes) == 0 or len(gt_boxes) == 0:
        return tp
    ious = box_iou(det_boxes, gt_boxes)
    taken = np.zeros(len(gt_boxes), dtype=bool)
    for i in range(len(det_boxes)):
        cand = np.where(taken, -1.0, ious[i])
        j = int(np.argmax(cand))
        if cand[j] >= iou_threshold:
            taken[j] = True
            tp[i] = True
    return tp


def interpolated_ap(tp: np.ndarray, n_gt: int) -> float:
    """101-point interpolated area under the precision/recall curve."""
    if n_gt == 0:
        return float("nan")
    if len(tp) == 0:
        return 0.0
    tps = np.cumsum(tp)
    fps = np.cumsum(~tp)
    recall = tps / n_gt
    precision = tps / (tps + fps)
    # monotone envelope from the right
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    q = np.where(idx < len(precision), precision[np.minimum(idx, len(precision) - 1)], 0.0)
    return float(q.mean())


def _det_key(image_id, det: Detection):
    b = det.box
    return (-det.score, image_id, b.x1, b.y1, b.x2, b.y2)


def average_precision(detections: Mapping[object, Sequence[Detection]],
                      ground_truth: Mapping[object, Sequence], K: int) -> EvalReport:
    """AP over IoU 0.50:0.05:0.95 averaged across classes that have ground truth.

    Both mappings are keyed by image id. Detections are ranked by score with
    ties broken by (image id, box), so the result does not depend on the order
    images were visited.
    """
    ids = sorted(set(ground_truth) | set(detections))
    ap = np.full((K, len(IOU_THRESHOLDS)), np.nan)
    tp_total = fp_total = fn_total = 0
    for k in range(K):
        gts = {i: np.array([b.as_array() for b in ground_truth.get(i, ()) if b.class_id == k]).reshape(-1, 4)
               for i in ids}
        n_gt = sum(len(g) for g in gts.values())
        ranked = sorted(((i, d) for i in ids for d in detections.get(i, ()) if d.class_id == k),
                        key=lambda item: _det_key(*item))
        for t_i, thr in enumerate(IOU_THRESHOLDS):
            flags = np.zeros(len(ranked), dtype=bool)
            for i in ids:
                pos = [n for n, (img, _) in enumerate(ranked) if img == i]
                if not pos:
                    continue
                boxes = np.array([ranked[n][1].box.as_array() for n in pos])
                flags[pos] = greedy_match(boxes, gts[i], thr)
            ap[k, t_i] = interpolated_ap(flags, n_gt)
            if t_i == 0:
                tp = int(flags.sum())
                tp_total += tp
                fp_total += len(flags) - tp
                fn_total += n_gt - tp
    valid = ~np.isnan(ap[:, 0])
    if not valid.any():
        return EvalReport(0.0, 0.0, 0.0, {}, tp_total, fp_total, fn_total)
    per_class = {k: float(ap[k].mean()) for k in range(K) if valid[k]}
    return EvalReport(float(ap[valid].mean()), float(ap[valid, 0].mean()), float(ap[valid, 5].mean()),
                      per_class, tp_total, fp_total, fn_total)


def predict(model: SplitCapsDetector, images: np.ndarray, threshold: float, top_n: int,
            batch_size: int = 16, with_masks: bool = False) -> list[list[Detection]]:
    """Decode detections for a stack of images [N, 3, H, W]."""
    out = []
    with no_grad():
        for s in range(0, len(images), batch_size):
            res = model(images[s:s + batch_size])
            heat, offs, sizes = res.heatmap_pred.data, res.offsets_pred.data, res.sizes_pred.data
            for b in range(heat.shape[0]):
                dets = decode_detections(heat[b], offs[b], sizes[b], threshold, top_n, model.cfg.d)
                if with_masks and dets:
                    vecs = np.stack([res.v_obj_cells.data[b, d.cell[0], d.cell[1]] for d in dets])
                    masks = model.reconstruct_mask(vecs).data
                    for d, m in zip(dets, masks):
                        d.mask = m
                out.append(dets)
    return out


def evaluate(model: SplitCapsDetector, samples: Sequence, image_ids: Sequence | None = None,
             threshold: float = 0.05, top_n: int = 100) -> EvalReport:
    image_ids = list(range(len(samples))) if image_ids is None else list(image_ids)
    if len(image_ids) != len(samples):
        raise ValueError("one image id per sample is required")
    if not samples:
        return EvalReport(0.0, 0.0, 0.0)
    images = np.stack([s.image for s in samples])
    dets = predict(model, images, threshold, top_n)
    return average_precision(dict(zip(image_ids, dets)),
                             {i: s.boxes for i, s in zip(image_ids, samples)}, model.cfg.K)


def load_model(path) -> tuple[SplitCapsDetector, RunConfig]:
    """Rebuild the detector recorded in a checkpoint."""
    ckpt = load_checkpoint(path)
    try:
        cfg = parse_config_text(ckpt.config_text, source=f"{path}[config]")
    except ConfigError as e:
        raise CheckpointError(f"{path}: embedded config is invalid ({e})") from e
    model = SplitCapsDetector(cfg.head, seed=cfg.train.seed)
    try:
        model.params.load_state(ckpt.params)
    except (KeyError, ValueError) as e:
        raise CheckpointError(f"{path}: checkpoint does not match its config ({e})") from e
    return model, cfg
