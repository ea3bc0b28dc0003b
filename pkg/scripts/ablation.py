"""Routing and deformation ablations at desk scale: AP50 per (mode, seed).

    python3 scripts/ablation.py [--seeds 0 1 2] [--modes deform no_routing non_deform] [--out ablation.json]

Each run trains from scratch with configs/desk.cfg, so three seeds of two
modes take roughly three hours on one core.
"""

import argparse
import json
import time
from pathlib import Path

from deformcaps.data import DatasetSpec
from deformcaps.pipeline import SampleSource, evaluate, load_config, train

ROOT = Path(__file__).resolve().parents[1]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default=str(ROOT / "configs" / "desk.cfg"))
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--modes", nargs="+", default=["deform", "no_routing"])
    ap.add_argument("--out", default="ablation.json")
    ap.add_argument("--run-dir", default="runs/ablation")
    args = ap.parse_args()

    base = load_config(args.config)
    spec = DatasetSpec(seed=base.eval.seed, start=base.eval.start, size=base.eval.size,
                       image_size=base.data.image_size, K=base.data.K)
    held_out = SampleSource(spec, base.head.image_size).samples
    rows = []
    for seed in args.seeds:
        for mode in args.modes:
            cfg = load_config(args.config)
            cfg.train.seed = seed
            cfg.head.ablation = mode
            cfg.train.output_dir = str(Path(args.run_dir) / f"{mode}-{seed}")
            t0 = time.perf_counter()
            model, _ = train(cfg)
            minutes = (time.perf_counter() - t0) / 60
            rep = evaluate(model, held_out, threshold=cfg.eval.threshold, top_n=cfg.eval.top_n)
            rows.append({"mode": mode, "seed": seed, "AP50": rep.AP50, "AP": rep.AP, "minutes": round(minutes, 1)})
            print(f"{mode:<11} seed {seed}  AP50 {rep.AP50:.3f}  AP {rep.AP:.3f}  {minutes:.1f} min", flush=True)
            Path(args.out).write_text(json.dumps(rows, indent=2))


if __name__ == "__main__":
    main()
