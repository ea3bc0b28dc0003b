"""Adam training loop over the composite detection objective."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .. import numerics as nx
from ..data import DatasetSpec, Sample, augment, coco_sample, load_coco_annotations, synthetic_sample
from ..geometry import encode_heatmap, encode_regression
from ..head import SplitCapsDetector
from ..losses import LossParts, dice_loss, focal_heatmap_loss, offset_loss, size_loss, total_loss
from ..numerics import make_rng
from .checkpoint import Checkpoint, save_checkpoint
from .config import RunConfig, config_to_text

logger = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    """Loss became non-finite; the last good checkpoint is left in place."""


class Adam:
    def __init__(self, params: nx.ParameterRegistry, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {p.name: np.zeros_like(p.value.data) for p in params}
        self.v = {p.name: np.zeros_like(p.value.data) for p in params}

    def step(self) -> None:
        self.t += 1
        c1 = 1 - self.beta1 ** self.t
        c2 = 1 - self.beta2 ** self.t
        for p in self.params:
            g = p.value.grad
            if g is None:
                continue
            m, v = self.m[p.name], self.v[p.name]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            p.value.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state(self) -> dict[str, np.ndarray]:
        out = {f"adam.m/{k}": v.copy() for k, v in self.m.items()}
        out.update({f"adam.v/{k}": v.copy() for k, v in self.v.items()})
        return out

    def load_state(self, moments: dict[str, np.ndarray], t: int) -> None:
        for k in self.m:
            self.m[k] = moments[f"adam.m/{k}"].copy()
            self.v[k] = moments[f"adam.v/{k}"].copy()
        self.t = t


@dataclass
class BatchTargets:
    heatmap: np.ndarray  # [B, K, h, w]
    offsets: np.ndarray  # [B, 2, h, w]
    sizes: np.ndarray  # [B, 2, h, w]
    mask: np.ndarray  # [B, h, w]
    P: int
    recon_index: tuple[np.ndarray, np.ndarray, np.ndarray]  # (batch, row, col)
    recon_masks: np.ndarray  # [M, 28, 28]


def build_targets(samples: Sequence[Sample], K: int, image_size: int, d: int) -> BatchTargets:
    heat, offs, sizes, masks = [], [], [], []
    bi, rows, cols, recon = [], [], [], []
    for b, s in enumerate(samples):
        heat.append(encode_heatmap(s.boxes, K, image_size, image_size, d).values)
        reg = encode_regression(s.boxes, image_size, image_size, d)
        offs.append(reg.offsets)
        sizes.append(reg.sizes)
        masks.append(reg.mask)
        for (row, col), obj in zip(reg.cells, reg.objects):
            bi.append(b)
            rows.append(row)
            cols.append(col)
            recon.append(s.masks[obj])
    mask = np.stack(masks)
    recon_masks = np.stack(recon) if recon else np.zeros((0, 28, 28))
    index = (np.array(bi, dtype=np.int64), np.array(rows, dtype=np.int64), np.array(cols, dtype=np.int64))
    return BatchTargets(np.stack(heat), np.stack(offs), np.stack(sizes), mask, int(mask.sum()), index,
                        recon_masks)


def compute_losses(model: SplitCapsDetector, images: np.ndarray, targets: BatchTargets, cfg: RunConfig):
    out = model(images)
    w = cfg.loss
    L_h = focal_heatmap_loss(out.heatmap_pred, targets.heatmap, w.alpha, w.beta, targets.P)
    L_o = offset_loss(out.offsets_pred, targets)
    L_s = size_loss(out.sizes_pred, targets)
    if len(targets.recon_masks):
        v = nx.getitem(out.v_obj_cells, targets.recon_index)
        L_r = dice_loss(model.reconstruct_mask(v), targets.recon_masks)
    else:
        L_r = nx.Tensor(0.0)
    return out, LossParts(L_h, L_r, L_s, L_o)


class SampleSource:
    """Base (un-augmented) samples for a dataset spec, cached in memory."""

    def __init__(self, spec: DatasetSpec, image_size: int):
        self.spec = spec
        if spec.kind == "synthetic":
            self.samples = [synthetic_sample(spec, i) for i in range(spec.start, spec.start + spec.size)]
            self.class_names = None
        else:
            index = load_coco_annotations(spec.path)
            n = len(index.entries) if spec.size <= 0 else min(spec.size, len(index.entries))
            self.samples = [coco_sample(index, i, image_size) for i in range(n)]
            self.class_names = tuple(index.categories)

    def __len__(self) -> int:
        return len(self.samples)


def lr_at(cfg: RunConfig, epoch: int) -> float:
    drops = sum(1 for e in cfg.train.lr_drops if epoch >= e)
    return cfg.optim.lr * cfg.train.lr_factor ** drops


def _write_checkpoint(path: Path, model, opt: Adam, cfg: RunConfig, step: int) -> None:
    save_checkpoint(path, Checkpoint(config_to_text(cfg), step, model.params.state(), opt.state()))


def train(cfg: RunConfig, source: SampleSource | None = None, max_steps: int | None = None,
          log_path: Path | None = None, write_checkpoints: bool = True):
    """Train from scratch; returns (model, list of metric records).

    Logs one record every ``train.log_interval`` steps and at the step where
    lambda_r changes. ``max_steps`` truncates the run without changing the
    schedule, which is always keyed to the full epoch budget.
    """
    source = source or SampleSource(cfg.data, cfg.head.image_size)
    if source.class_names and not cfg.class_names:
        cfg.class_names = source.class_names
    out_dir = Path(cfg.train.output_dir)
    if write_checkpoints:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "config.txt").write_text(config_to_text(cfg))
    log_path = log_path or (out_dir / "metrics.jsonl" if write_checkpoints else None)
    log_file = open(log_path, "w") if log_path else None

    seed = cfg.train.seed
    model = SplitCapsDetector(cfg.head, seed=seed)
    opt = Adam(model.params, cfg.optim.lr, cfg.optim.beta1, cfg.optim.beta2, cfg.optim.eps)
    n = len(source)
    bs = cfg.train.batch_size
    steps_per_epoch = math.ceil(n / bs)
    total_steps = steps_per_epoch * cfg.train.epochs
    records = []
    step = 0
    prev_lambda = None
    t0 = time.time()
    try:
        for epoch in range(cfg.train.epochs):
            opt.lr = lr_at(cfg, epoch)
            order = make_rng([seed, epoch, 101]).permutation(n)
            stopped = False
            for bstart in range(0, n, bs):
                if max_steps is not None and step >= max_steps:
                    stopped = True
                    break
                idx = order[bstart:bstart + bs]
                batch = []
                for i in idx:
                    s = source.samples[i]
                    if cfg.data.augments:
                        s = augment(s, cfg.data, make_rng([seed, epoch, int(i), 202]))
                    batch.append(s)
                images = np.stack([s.image for s in batch])
                targets = build_targets(batch, cfg.head.K, cfg.head.image_size, cfg.head.d)
                progress = step / total_steps
                model.params.zero_grad()
                _, parts = compute_losses(model, images, targets, cfg)
                loss = total_loss(parts, cfg.loss, progress)
                lam = cfg.loss.lambda_r(progress)
                if not math.isfinite(loss.item()):
                    raise TrainingDiverged(f"non-finite loss {loss.item()} at step {step} "
                                           f"(epoch {epoch}, batch {bstart // bs})")
                loss.backward()
                opt.step()
                if step % cfg.train.log_interval == 0 or lam != prev_lambda:
                    rec = {"step": step, "epoch": epoch, "lr": opt.lr, "lambda_r": lam,
                           "L_h": parts.heatmap.item(), "L_r": parts.recon.item(),
                           "L_s": parts.size.item(), "L_o": parts.offset.item(), "total": loss.item()}
                    records.append(rec)
                    if log_file:
                        log_file.write(json.dumps(rec) + "\n")
                        log_file.flush()
                    logger.info("step %d epoch %d loss %.4f (%.0fs)", step, epoch, loss.item(), time.time() - t0)
                prev_lambda = lam
                step += 1
            if write_checkpoints and (cfg.train.checkpoint_every_epoch or stopped or epoch == cfg.train.epochs - 1):
                _write_checkpoint(out_dir / "last.ckpt", model, opt, cfg, step)
            if stopped:
                break
    finally:
        if log_file:
            log_file.close()
    return model, records
