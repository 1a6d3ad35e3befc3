"""Command-line entry points.

Subcommands: pretrain, train, eval, sweep, report, account. Exit codes:
0 success, 1 configuration error, 2 runtime/numerical failure, 3 partial
sweep failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .errors import ConfigurationError, ParseError
from . import experiment
from .cost import count_params, estimate_flops, render_cost_table, training_cost_summary


def _parse_seeds(text):
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError as e:
        raise ConfigurationError(f"--seeds expects comma-separated integers, got {text!r}") from e


def build_parser():
    parser = argparse.ArgumentParser(prog="detlab", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="experiment config JSON")
        p.add_argument("--out", required=True, help="output directory")
        return p

    common(sub.add_parser("pretrain", help="build the classification checkpoint for a config"))
    t = common(sub.add_parser("train", help="train + evaluate one cell per seed"))
    t.add_argument("--seeds", default=None, help="comma-separated seed list")
    e = common(sub.add_parser("eval", help="evaluate a saved detector checkpoint"))
    e.add_argument("--checkpoint", required=True)
    s = common(sub.add_parser("sweep", help="run the config grid"))
    s.add_argument("--seeds", default=None)
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--resume", action="store_true", default=True,
                   help="skip cells with completed records (always on; flag kept for explicitness)")
    r = sub.add_parser("report", help="regenerate tables from stored records")
    r.add_argument("--out", required=True)
    r.add_argument("--baseline", default="FineTune")
    common(sub.add_parser("account", help="parameter/FLOP report without training"))
    return parser


def cmd_pretrain(args):
    config = experiment.load_config(args.config)
    _, path = experiment.ensure_pretrained(config, args.out)
    print(f"pretrained checkpoint: {path}")
    return 0


def cmd_train(args):
    config = experiment.load_config(args.config)
    seeds = _parse_seeds(args.seeds) if args.seeds else config.get("seeds", [1])
    for seed in seeds:
        record = experiment.run_cell(config, seed, args.out)
        rep = record["eval_report"]
        print(
            f"seed {seed}: mAP {experiment.fmt100(rep['mAP'])} "
            f"AP50 {experiment.fmt100(rep['AP50'])} ({record['config_hash']})"
        )
    return 0


def cmd_eval(args):
    from .data import write_detections_json
    from .models import DetectorSpec, build_detector
    from .train import evaluate_detector, load_checkpoint, load_into

    config = experiment.load_config(args.config)
    spec = DetectorSpec.from_dict(config["detector"])
    model = build_detector(spec, seed=0)
    ckpt = load_checkpoint(args.checkpoint)
    if config["regime"] == "FreezeWithAdapters":
        from .train import partition_parameters

        partition_parameters(model, "FreezeWithAdapters", checkpoint=ckpt, seed=0)
    load_into(model, ckpt)
    val = experiment.materialize_dataset("detection_val", config["datasets"]["detection_val"], args.out)
    train_ds = experiment.materialize_dataset(
        "detection_train", config["datasets"]["detection_train"], args.out
    )
    detections, report = evaluate_detector(
        model, val, train_image_counts=train_ds.class_image_counts(), **config.get("eval", {})
    )
    out = Path(args.out) / "eval"
    out.mkdir(parents=True, exist_ok=True)
    write_detections_json(detections, out / "detections.json")
    (out / "eval.json").write_text(json.dumps(report.to_dict(), sort_keys=True, indent=1))
    print(f"mAP {experiment.fmt100(report.map)} AP50 {experiment.fmt100(report.ap50)}")
    return 0


def cmd_sweep(args):
    config = experiment.load_config(args.config)
    seeds = _parse_seeds(args.seeds) if args.seeds else None
    records, failed = experiment.cmd_sweep(
        config, args.out, seeds=seeds, workers=args.workers, resume=args.resume
    )
    print(f"sweep: {len(records)} new runs, {failed} failed")
    return 3 if failed else 0


def cmd_report(args):
    table, _ = experiment.cmd_report(args.out, baseline_regime=args.baseline)
    print(table)
    return 0


def cmd_account(args):
    from .models import DetectorSpec, build_detector
    from .train import partition_parameters

    config = experiment.load_config(args.config)
    spec = DetectorSpec.from_dict(config["detector"])
    model = build_detector(spec, seed=0)
    regime = config["regime"]
    if regime == "Scratch":
        partition_parameters(model, "Scratch")
    else:
        ckpt, _ = experiment.ensure_pretrained(config, args.out)
        partition_parameters(model, regime, checkpoint=ckpt, seed=0)
    train_cfg = config["train"]
    canvas = config["datasets"]["detection_train"]["scene"].get("canvas", [64, 64])
    report = estimate_flops(model, (train_cfg.get("batch_size", 8), 3, *canvas), regime)
    report.model_label = experiment.model_label(spec)
    out = Path(args.out) / "reports"
    out.mkdir(parents=True, exist_ok=True)
    (out / f"cost_{experiment.config_hash(config)}.json").write_text(
        json.dumps(report.to_dict(), sort_keys=True, indent=1)
    )
    row = training_cost_summary([], report)
    print(render_cost_table([row]))
    return 0


COMMANDS = {
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "report": cmd_report,
    "account": cmd_account,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (ConfigurationError, ParseError) as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # runtime/numerical failure
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
