"""Train one detector on synthetic shapes and report held-out AP.

    python3 scripts/train_synthetic.py [--config configs/desk.cfg] [--seed 0] [section.key=value ...]
"""

import argparse
import json
import logging
import time
from pathlib import Path

from deformcaps.data import DatasetSpec
from deformcaps.pipeline import SampleSource, evaluate, load_config, parse_assignments, train

ROOT = Path(__file__).resolve().parents[1]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default=str(ROOT / "configs" / "desk.cfg"))
    ap.add_argument("--seed", type=int)
    ap.add_argument("overrides", nargs="*", help="section.key=value")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    pairs = [tuple(o.split("=", 1)) for o in args.overrides]
    if args.seed is not None:
        pairs.append(("train.seed", str(args.seed)))
    cfg = parse_assignments(pairs, load_config(args.config))

    t0 = time.perf_counter()
    model, _ = train(cfg)
    train_s = time.perf_counter() - t0
    spec = DatasetSpec(seed=cfg.eval.seed, start=cfg.eval.start, size=cfg.eval.size,
                       image_size=cfg.data.image_size, K=cfg.data.K)
    report = evaluate(model, SampleSource(spec, cfg.head.image_size).samples,
                      threshold=cfg.eval.threshold, top_n=cfg.eval.top_n)
    out = {"ablation": cfg.head.ablation, "seed": cfg.train.seed, "train_minutes": round(train_s / 60, 2),
           **report.as_dict(cfg.class_names)}
    print(json.dumps(out, indent=2))


if __name__ == "__main__":
    main()
