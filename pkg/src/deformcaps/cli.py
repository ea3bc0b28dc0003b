"""Command-line entry point: train, eval, detect, param-count.

Failures print one JSON object ``{"error": ..., "message": ...}`` on stderr
and exit with status 2 (usage) or 1 (everything else).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .capsules import PARAM_MODES, LayerConfig, paper_scenarios, param_count

# error kind reported on stderr, by exception class name
ERROR_KINDS = {"ConfigError": "config", "CheckpointError": "checkpoint", "CocoFormatError": "dataset",
               "TrainingDiverged": "diverged"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def human_bytes(n: int) -> str:
    for unit in ("B", "KB", "MB", "GB", "TB"):
        if n < 1000 or unit == "TB":
            return f"{n:.0f} {unit}" if unit == "B" else f"{n:.1f} {unit}"
        n /= 1000
    raise AssertionError


def param_table_rows() -> list[dict]:
    rows = []
    for label, mode, cfg, K in paper_scenarios():
        params, nbytes = param_count(mode, cfg, K)
        rows.append({"scenario": label, "mode": mode, "parameters": params, "intermediate_bytes": nbytes})
    return rows


def _format_row(row: dict) -> str:
    return (f"{row['scenario']:<48} {row['parameters']:>15,} {row['intermediate_bytes']:>18,}"
            f"  ({human_bytes(row['intermediate_bytes'])})")


def _overrides(extra: list[str]) -> list[tuple[str, str]]:
    """Turn ``--section.key value`` / ``--section.key=value`` leftovers into pairs."""
    pairs = []
    it = iter(extra)
    for tok in it:
        if not tok.startswith("--") or "." not in tok and tok[2:] != "class_names":
            raise UsageError(f"unrecognized argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, value = key.split("=", 1)
        else:
            value = next(it, None)
            if value is None:
                raise UsageError(f"{tok} needs a value")
        pairs.append((key.replace("-", "_"), value))
    return pairs


def cmd_train(args, extra) -> dict:
    from .data import DatasetSpec
    from .pipeline import RunConfig, SampleSource, evaluate, load_config, parse_assignments, train

    base = load_config(args.config) if args.config else RunConfig()
    pairs = _overrides(extra)
    if args.seed is not None:
        pairs.append(("train.seed", str(args.seed)))
    if args.ablation is not None:
        pairs.append(("head.ablation", args.ablation))
    cfg = parse_assignments(pairs, base)
    model, records = train(cfg)
    out = Path(cfg.train.output_dir)
    result = {"output_dir": str(out), "checkpoint": str(out / "last.ckpt"),
              "final_loss": records[-1]["total"] if records else None}
    if cfg.data.kind == "synthetic" and cfg.eval.size > 0:
        spec = DatasetSpec(seed=cfg.eval.seed, start=cfg.eval.start, size=cfg.eval.size,
                           image_size=cfg.data.image_size, K=cfg.data.K)
        report = evaluate(model, SampleSource(spec, cfg.head.image_size).samples,
                          threshold=cfg.eval.threshold, top_n=cfg.eval.top_n)
        result["eval"] = report.as_dict(cfg.class_names)
    return result


def cmd_eval(args, extra) -> dict:
    from .data import DatasetSpec
    from .pipeline import SampleSource, evaluate, load_model

    if extra:
        raise UsageError(f"unrecognized arguments {' '.join(extra)}")
    model, cfg = load_model(args.checkpoint)
    if args.dataset == "synthetic":
        spec = DatasetSpec(seed=cfg.eval.seed, start=cfg.eval.start,
                           size=args.size if args.size is not None else cfg.eval.size,
                           image_size=cfg.head.image_size, K=cfg.head.K)
    else:
        spec = DatasetSpec(kind="coco_json", path=args.dataset, size=args.size or 0,
                           image_size=cfg.head.image_size, K=cfg.head.K)
    source = SampleSource(spec, cfg.head.image_size)
    report = evaluate(model, source.samples, threshold=cfg.eval.threshold, top_n=cfg.eval.top_n)
    return report.as_dict(cfg.class_names)


def cmd_detect(args, extra) -> list:
    from .data import read_ppm
    from .pipeline import load_model, predict

    if extra:
        raise UsageError(f"unrecognized arguments {' '.join(extra)}")
    model, cfg = load_model(args.checkpoint)
    try:
        image = read_ppm(args.image)
    except (OSError, ValueError) as e:
        raise ValueError(f"{args.image}: cannot decode image ({e})") from e
    size = cfg.head.image_size
    if image.shape[1:] != (size, size):
        raise ValueError(f"{args.image}: image is {image.shape[2]}x{image.shape[1]}, model expects {size}x{size}")
    threshold = cfg.eval.detect_threshold if args.threshold is None else args.threshold
    dets = predict(model, image[None], threshold, cfg.eval.top_n, with_masks=not args.no_masks)[0]
    names = cfg.class_names
    records = []
    for d in dets:
        rec = {"class": names[d.class_id] if d.class_id < len(names) else str(d.class_id),
               "class_id": d.class_id, "score": d.score,
               "box": [d.box.x1, d.box.y1, d.box.x2, d.box.y2]}
        if d.mask is not None:
            rec["mask"] = np.round(d.mask, 4).tolist()
        records.append(rec)
    return records


def cmd_param_count(args, extra) -> list:
    if extra:
        raise UsageError(f"unrecognized arguments {' '.join(extra)}")
    if args.paper_table:
        return param_table_rows()
    if args.mode is None:
        raise UsageError("param-count needs --paper-table or --mode")
    cfg = LayerConfig(c_i=args.c_i, a_i=args.a_i, c_j=args.c_j, a_j=args.a_j, k=args.k, H=args.grid, W=args.grid)
    params, nbytes = param_count(args.mode, cfg, args.classes, args.batch)
    return [{"scenario": "custom", "mode": args.mode, "parameters": params, "intermediate_bytes": nbytes}]


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="deformcaps", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train a detector; extra --section.key value pairs override the config")
    t.add_argument("--config")
    t.add_argument("--seed", type=int)
    t.add_argument("--ablation", choices=["deform", "non-deform", "no-routing", "non_deform", "no_routing"])
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="AP of a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--dataset", required=True, help="annotation file, or 'synthetic' for the held-out split")
    e.add_argument("--size", type=int)
    e.set_defaults(func=cmd_eval)

    d = sub.add_parser("detect", help="detections for one PPM image as JSON")
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--image", required=True)
    d.add_argument("--threshold", type=float)
    d.add_argument("--no-masks", action="store_true")
    d.set_defaults(func=cmd_detect)

    c = sub.add_parser("param-count", help="capsule layer parameter and memory arithmetic")
    c.add_argument("--paper-table", action="store_true")
    c.add_argument("--mode", choices=PARAM_MODES)
    c.add_argument("--c-i", type=int, default=32)
    c.add_argument("--a-i", type=int, default=8)
    c.add_argument("--c-j", type=int, default=10)
    c.add_argument("--a-j", type=int, default=16)
    c.add_argument("--k", type=int, default=5)
    c.add_argument("--grid", type=int, default=128)
    c.add_argument("--classes", type=int)
    c.add_argument("--batch", type=int, default=32)
    c.add_argument("--json", action="store_true")
    c.set_defaults(func=cmd_param_count)
    return p


def _fail(kind: str, message: str, code: int) -> int:
    sys.stderr.write(json.dumps({"error": kind, "message": message}) + "\n")
    return code


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        result = args.func(args, extra)
    except UsageError as e:
        return _fail("usage", str(e), 2)
    except (OSError, ValueError, FloatingPointError) as e:
        name = type(e).__name__
        return _fail(ERROR_KINDS.get(name, name), str(e), 1)
    if args.command == "param-count" and not args.json:
        print(f"{'scenario':<48} {'parameters':>15} {'intermediate bytes':>18}")
        for row in result:
            print(_format_row(row))
    else:
        print(json.dumps(result, indent=None if args.command == "detect" else 2))
    return 0


if __name__ == "__main__":
    sys.exit(main())
