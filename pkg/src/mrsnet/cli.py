"""Command-line interface: split, train, eval, ablate, plus a synthetic-data
generator for demos.

Every command exits nonzero on error with a single-line reason on stderr.
The MRSNET_NUM_THREADS environment variable caps torch's thread count.
"""

import argparse
import json
import os
import sys
from pathlib import Path

from . import harness, reporting
from .data_model import (
    apply_splits,
    load_dataset,
    read_splits,
    stratified_split,
    write_splits,
)
from .synthetic import generate_synthetic_dataset


def _load_index(manifest_path, splits_path=None):
    manifest_path = Path(manifest_path)
    index = load_dataset(manifest_path.parent, manifest_path)
    if splits_path:
        index = apply_splits(index, read_splits(splits_path))
    return index


def _cmd_split(args):
    index = _load_index(args.manifest)
    ratios = tuple(float(r) for r in args.ratios.split(","))
    index = stratified_split(index, ratios, args.seed)
    out = args.out or str(Path(args.manifest).parent / "splits.json")
    write_splits(index.splits, out)
    sizes = {name: len(ids) for name, ids in index.splits.items()}
    print(json.dumps({"splits": out, "sizes": sizes}))
    return 0


def _cmd_train(args):
    config = harness.TrainConfig.from_json(args.config)
    if args.epochs is not None:
        config.epochs = args.epochs
    if args.seed is not None:
        config.seed = args.seed
    index = _load_index(args.data, args.splits)
    result = harness.train(config, index, args.out)
    print(reporting.format_metrics_table({result.eval_split: result.final_metrics}), end="")
    print(json.dumps({"checkpoint": result.checkpoint_best, "log": result.log_path}))
    return 0


def _cmd_eval(args):
    index = _load_index(args.data, args.splits)
    report, records = harness.evaluate(
        args.ckpt, index, args.split, out_dir=args.out, threshold=args.threshold
    )
    print(reporting.format_metrics_table({args.split: report}), end="")
    print(json.dumps({"split": args.split, "num_samples": len(records), "out": args.out}))
    return 0


def _cmd_ablate(args):
    config = harness.TrainConfig.from_json(args.config)
    index = _load_index(args.data, args.splits)
    rows = harness.ablate(config, index, args.out, split=args.split)
    print(reporting.format_ablation_table(rows), end="")
    print(json.dumps({"out": args.out, "rows": len(rows)}))
    return 0


def _cmd_synth(args):
    manifest = generate_synthetic_dataset(
        args.out,
        n_single=args.n_single,
        n_multi=args.n_multi,
        n_non_object=args.n_non_object,
        image_size=args.size,
        seed=args.seed,
    )
    print(json.dumps({"manifest": str(manifest)}))
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="mrsnet", description="Referring segmentation toolkit"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("split", help="write a region-stratified split file")
    p.add_argument("--manifest", required=True)
    p.add_argument("--ratios", default="0.7,0.1,0.2")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=_cmd_split)

    p = sub.add_parser("train", help="train a model from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True, help="manifest path")
    p.add_argument("--splits", help="optional splits JSON from the split command")
    p.add_argument("--out", default="runs/train")
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True, help="manifest path")
    p.add_argument("--split", default="val", choices=["train", "val", "test"])
    p.add_argument("--splits")
    p.add_argument("--threshold", type=float)
    p.add_argument("--out", default="runs/eval")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("ablate", help="run the 3-row branch on-off grid")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True, help="manifest path")
    p.add_argument("--splits")
    p.add_argument("--split", choices=["train", "val", "test"])
    p.add_argument("--out", default="runs/ablate")
    p.set_defaults(func=_cmd_ablate)

    p = sub.add_parser("synth", help="generate a synthetic shapes dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n-single", type=int, default=8)
    p.add_argument("--n-multi", type=int, default=0)
    p.add_argument("--n-non-object", type=int, default=0)
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_synth)

    return parser


def main(argv=None):
    threads = os.environ.get("MRSNET_NUM_THREADS")
    if threads:
        import torch

        torch.set_num_threads(int(threads))
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        reason = " ".join(str(exc).split())
        print(f"error: {type(exc).__name__}: {reason}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
