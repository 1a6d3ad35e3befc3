"""Experiment orchestration: configs, run records, sweeps, and reports.

An experiment config is one strict-schema JSON document (unknown keys are an
error at every level, which catches sweep-axis typos before any compute is
spent). Every run writes an immutable RunRecord JSON named by config hash
and seed; re-running an identical config appends a new record. Sweeps
expand a cartesian grid over a fixed set of axes, share pretraining
checkpoints through a content-keyed cache, skip cells that already have a
completed record, and keep going past failed cells (recorded with their
error text).

Reports are regenerated purely from stored records: per-cell mean and
min-max spread over seeds, signed deltas against a baseline regime,
trained-parameter fractions, and the per-comparison class-wise delta curve
CSV. Numbers render x100 with one decimal.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

from .cost import count_params, estimate_flops, training_cost_summary
from .data import (
    AugmentPolicy,
    SceneSpec,
    generate_classification_set,
    generate_detection_set,
    load_dataset,
    save_dataset,
    write_detections_json,
)
from .errors import ConfigurationError
from .evalmetrics import EvalReport, classwise_relative_curve, write_curve_csv
from .models import DetectorSpec, build_detector
from .train import (
    TrainConfig,
    balanced_stage2_tune,
    evaluate_detector,
    load_checkpoint,
    partition_parameters,
    pretrain_classifier,
    save_checkpoint,
    snapshot,
    train_detector,
    write_run_log,
)

GRID_AXES = (
    "regime",
    "decoder_variant",
    "filters",
    "rpn_convs",
    "cascade_stages",
    "pretrain_scale",
    "adapters",
    "seed",
)

TOP_LEVEL_KEYS = {
    "name",
    "detector",
    "regime",
    "train",
    "augment",
    "datasets",
    "pretrain_config",
    "eval",
    "stage2",
    "seeds",
    "grid",
}

DATASET_ROLES = ("pretrain", "detection_train", "detection_val")


def load_config(path):
    with open(path) as f:
        raw = json.load(f)
    return validate_config(raw)


def validate_config(raw):
    unknown = set(raw) - TOP_LEVEL_KEYS
    if unknown:
        raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
    for required in ("name", "detector", "regime", "train", "datasets"):
        if required not in raw:
            raise ConfigurationError(f"config is missing required key {required!r}")
    DetectorSpec.from_dict(raw["detector"])
    TrainConfig.from_dict(raw["train"])
    AugmentPolicy.from_dict(raw.get("augment", {}))
    ds = raw["datasets"]
    unknown = set(ds) - set(DATASET_ROLES)
    if unknown:
        raise ConfigurationError(f"unknown dataset roles: {sorted(unknown)}")
    for role in ("detection_train", "detection_val"):
        if role not in ds:
            raise ConfigurationError(f"datasets must define {role!r}")
    if raw["regime"] != "Scratch" and "pretrain" not in ds:
        raise ConfigurationError(f"regime {raw['regime']} references a pretrain dataset that is not defined")
    if "grid" in raw and raw["grid"]:
        bad = set(raw["grid"]) - set(GRID_AXES)
        if bad:
            raise ConfigurationError(f"unknown sweep axes: {sorted(bad)}; allowed: {GRID_AXES}")
    return raw


def canonical_json(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(cell_config):
    payload = {k: v for k, v in cell_config.items() if k not in ("seeds", "grid")}
    return hashlib.sha256(canonical_json(payload).encode()).hexdigest()[:16]


def model_label(spec):
    d = spec.decoder
    label = f"{d.variant}-f{d.filters}"
    if d.variant == "multi_merge_lite":
        label += f"-r{d.merge_repeats}"
    h = spec.head
    if h.kind == "single_stage":
        label += "-ss"
    elif h.cascade_stages:
        label += f"-cascade{h.cascade_stages}"
    return label


# ---------------------------------------------------------------------------
# dataset and pretraining materialization


def _dataset_fingerprint(role, spec_dict):
    return hashlib.sha256(canonical_json({"role": role, "spec": spec_dict}).encode()).hexdigest()[:12]


def materialize_dataset(role, spec_dict, out_dir):
    """Build (or load from cache) the dataset a config role refers to."""
    fp = _dataset_fingerprint(role, spec_dict)
    cache = Path(out_dir) / "datasets" / f"{role}-{fp}"
    if (cache / "manifest.json").exists():
        return load_dataset(cache)
    if role == "pretrain":
        known = {"scale", "seed", "n_images", "n_classes", "canvas"}
        unknown = set(spec_dict) - known
        if unknown:
            raise ConfigurationError(f"unknown pretrain dataset keys: {sorted(unknown)}")
        kw = dict(spec_dict)
        if "canvas" in kw:
            kw["canvas"] = tuple(kw["canvas"])
        ds = generate_classification_set(dataset_id=f"{role}-{fp}", **kw)
    else:
        known = {"scene", "n_images"}
        unknown = set(spec_dict) - known
        if unknown:
            raise ConfigurationError(f"unknown {role} dataset keys: {sorted(unknown)}")
        scene_kw = dict(spec_dict["scene"])
        for tup in ("canvas", "size_range", "objects_per_image"):
            if tup in scene_kw:
                scene_kw[tup] = tuple(scene_kw[tup])
        scene = SceneSpec(**scene_kw)
        ds = generate_detection_set(scene, spec_dict["n_images"], dataset_id=f"{role}-{fp}")
    save_dataset(ds, cache)
    return ds


def pretrain_cache_key(backbone_dict, pretrain_ds_dict, pretrain_cfg_dict):
    blob = canonical_json(
        {"backbone": backbone_dict, "dataset": pretrain_ds_dict, "config": pretrain_cfg_dict}
    )
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def ensure_pretrained(config, out_dir):
    """Pretrain (or fetch cached) classification checkpoint for a config."""
    spec = DetectorSpec.from_dict(config["detector"])
    pre_cfg_dict = config.get("pretrain_config", {"batch_size": 64, "base_lr": 0.05, "epochs": 4, "seed": 0})
    key = pretrain_cache_key(config["detector"]["backbone"], config["datasets"]["pretrain"], pre_cfg_dict)
    path = Path(out_dir) / "pretrain" / f"{key}.ckpt"
    if path.exists():
        return load_checkpoint(path), path
    dataset = materialize_dataset("pretrain", config["datasets"]["pretrain"], out_dir)
    pre_cfg = TrainConfig.from_dict(pre_cfg_dict)
    ckpt, log = pretrain_classifier(spec.backbone, dataset, pre_cfg)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp")
    save_checkpoint(ckpt, tmp)
    os.replace(tmp, path)
    write_run_log(log, path.with_suffix(".log.jsonl"))
    return ckpt, path


# ---------------------------------------------------------------------------
# single runs


def run_cell(config, seed, out_dir):
    """Train + evaluate one (config, seed) cell and write its RunRecord."""
    out_dir = Path(out_dir)
    t_start = time.time()
    spec = DetectorSpec.from_dict(config["detector"])
    train_cfg = replace(TrainConfig.from_dict(config["train"]), seed=seed)
    augment = AugmentPolicy.from_dict(config.get("augment", {}))
    regime = config["regime"]

    train_ds = materialize_dataset("detection_train", config["datasets"]["detection_train"], out_dir)
    val_ds = materialize_dataset("detection_val", config["datasets"]["detection_val"], out_dir)
    checkpoint = None
    ckpt_path = None
    if regime != "Scratch":
        checkpoint, ckpt_path = ensure_pretrained(config, out_dir)

    model = build_detector(spec, seed=seed)
    summary = partition_parameters(model, regime, checkpoint=checkpoint, seed=seed)
    model, run_log = train_detector(model, regime, train_ds, train_cfg, augment)

    stage1_report = None
    if config.get("stage2"):
        s2 = dict(config["stage2"])
        unknown = set(s2) - {"epochs", "base_lr", "alpha", "reinit_classifier", "batch_size"}
        if unknown:
            raise ConfigurationError(f"unknown stage2 keys: {sorted(unknown)}")
        eval_kw = config.get("eval", {})
        _, stage1_report = evaluate_detector(
            model, val_ds, train_image_counts=train_ds.class_image_counts(), **eval_kw
        )
        alpha = s2.pop("alpha", 1.0)
        reinit = s2.pop("reinit_classifier", False)
        s2_cfg = replace(TrainConfig.from_dict({**config["train"], **s2}), seed=seed)
        model, s2_log = balanced_stage2_tune(model, train_ds, s2_cfg, augment, alpha=alpha,
                                             reinit_classifier=reinit)
        run_log = run_log + s2_log

    eval_kw = config.get("eval", {})
    detections, eval_report = evaluate_detector(
        model, val_ds, train_image_counts=train_ds.class_image_counts(), **eval_kw
    )
    cost = estimate_flops(model, (train_cfg.batch_size, 3, *train_ds.canvas), regime)
    cost.model_label = model_label(spec)

    h = config_hash(config)
    run_dir = out_dir / "runs" / f"{h}_s{seed}"
    run_dir.mkdir(parents=True, exist_ok=True)
    write_run_log(run_log, run_dir / "run_log.jsonl")
    save_checkpoint(snapshot(model, rng_state={"seed": seed}), run_dir / "model.ckpt")
    write_detections_json(detections, run_dir / "detections.json")
    (run_dir / "eval.json").write_text(json.dumps(eval_report.to_dict(), sort_keys=True, indent=1))

    record = {
        "config_hash": h,
        "name": config["name"],
        "model_label": cost.model_label,
        "regime": regime,
        "seed": seed,
        "status": "completed",
        "eval_report": eval_report.to_dict(),
        "eval_report_stage1": stage1_report.to_dict() if stage1_report else None,
        "partition_summary": summary,
        "cost": cost.to_dict(),
        "summary_row": training_cost_summary(run_log, cost, eval_report),
        "train_annotation_counts": {str(k): v for k, v in train_ds.class_annotation_counts().items()},
        "train_image_counts": {str(k): v for k, v in train_ds.class_image_counts().items()},
        "paths": {
            "run_dir": str(run_dir),
            "pretrain_checkpoint": str(ckpt_path) if ckpt_path else None,
        },
        "timestamps": {"start": t_start, "end": time.time()},
        "config": {k: v for k, v in config.items() if k not in ("grid",)},
    }
    write_record(record, out_dir)
    return record


def write_record(record, out_dir, status_suffix=""):
    records = Path(out_dir) / "records"
    records.mkdir(parents=True, exist_ok=True)
    base = f"record_{record['config_hash']}_s{record['seed']}"
    n = 0
    while (records / f"{base}_{n}{status_suffix}.json").exists():
        n += 1
    path = records / f"{base}_{n}{status_suffix}.json"
    tmp = path.with_suffix(".tmp")
    tmp.write_text(json.dumps(record, sort_keys=True, indent=1))
    os.replace(tmp, path)
    return path


def load_records(out_dir):
    records_dir = Path(out_dir) / "records"
    if not records_dir.exists():
        return []
    return [json.loads(p.read_text()) for p in sorted(records_dir.glob("record_*.json"))]


def completed_cells(out_dir):
    return {
        (r["config_hash"], r["seed"])
        for r in load_records(out_dir)
        if r.get("status") == "completed"
    }


# ---------------------------------------------------------------------------
# sweeps


def expand_grid(config):
    """Cartesian product of grid axes into fully resolved cell configs."""
    grid = config.get("grid") or {}
    axes = [(k, list(v)) for k, v in sorted(grid.items()) if k != "seed"]
    seeds = grid.get("seed", config.get("seeds", [1, 2, 3]))
    cells = []
    for combo in itertools.product(*(v for _, v in axes)) if axes else [()]:
        cell = json.loads(json.dumps({k: v for k, v in config.items() if k != "grid"}))
        overrides = dict(zip((k for k, _ in axes), combo))
        _apply_axes(cell, overrides)
        cell["seeds"] = list(seeds)
        cells.append((overrides, cell))
    return cells


def _apply_axes(cell, overrides):
    for axis, value in overrides.items():
        if axis == "regime":
            cell["regime"] = value
        elif axis == "decoder_variant":
            cell["detector"]["decoder"]["variant"] = value
        elif axis == "filters":
            cell["detector"]["decoder"]["filters"] = value
        elif axis == "rpn_convs":
            cell["detector"]["head"]["rpn_convs"] = value
        elif axis == "cascade_stages":
            cell["detector"]["head"]["cascade_stages"] = value
        elif axis == "pretrain_scale":
            cell["datasets"]["pretrain"]["scale"] = value
        elif axis == "adapters":
            cell["detector"].setdefault("adapter", {})["enabled"] = bool(value)
            if value:
                if cell["regime"] not in ("Freeze", "FreezeWithAdapters"):
                    raise ConfigurationError("the adapters axis requires a frozen-backbone regime")
                cell["regime"] = "FreezeWithAdapters"
    DetectorSpec.from_dict(cell["detector"])


def _sweep_task(args):
    cell, seed, out_dir = args
    return run_cell(cell, seed, out_dir)


def cmd_sweep(config, out_dir, seeds=None, workers=1, resume=True):
    """Run the grid; returns (records, n_failed). Completed cells are skipped."""
    validate_config(config)
    cells = expand_grid(config)
    done = completed_cells(out_dir) if resume else set()
    tasks = []
    for _, cell in cells:
        h = config_hash(cell)
        for seed in seeds if seeds is not None else cell["seeds"]:
            if (h, seed) not in done:
                tasks.append((cell, seed, out_dir))
    results, failed = [], 0
    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = {pool.submit(_sweep_task, t): t for t in tasks}
            for fut, t in futures.items():
                try:
                    results.append(fut.result())
                except Exception as e:  # cell failure must not sink the sweep
                    failed += 1
                    _record_failure(t, e, out_dir)
    else:
        for t in tasks:
            try:
                results.append(_sweep_task(t))
            except Exception as e:
                failed += 1
                _record_failure(t, e, out_dir)
    return results, failed


def _record_failure(task, exc, out_dir):
    cell, seed, _ = task
    write_record(
        {
            "config_hash": config_hash(cell),
            "name": cell.get("name", ""),
            "model_label": "",
            "regime": cell.get("regime", ""),
            "seed": seed,
            "status": "failed",
            "error": f"{type(exc).__name__}: {exc}",
            "timestamps": {"end": time.time()},
        },
        out_dir,
    )


# ---------------------------------------------------------------------------
# reporting


def fmt100(x):
    return f"{100.0 * x:.1f}"


def _group_records(records):
    groups = {}
    for r in records:
        if r.get("status") != "completed":
            continue
        key = (r["model_label"], r["regime"], r["config_hash"])
        groups.setdefault(key, []).append(r)
    return groups


def cmd_report(out_dir, baseline_regime="FineTune"):
    """Tables + CSVs from stored records only; no training is recomputed."""
    records = load_records(out_dir)
    groups = _group_records(records)
    if not groups:
        raise ConfigurationError(f"no completed records under {out_dir}")
    by_cell = {}
    for (label, regime, h), recs in sorted(groups.items()):
        maps = [r["eval_report"]["mAP"] for r in sorted(recs, key=lambda r: r["seed"])]
        by_cell[(label, regime)] = {
            "config_hash": h,
            "records": recs,
            "maps": maps,
            "mean": math.fsum(maps) / len(maps),
            "lo": min(maps),
            "hi": max(maps),
            "trained_fraction": recs[0]["cost"]["trained_fraction"],
        }
    labels = sorted({label for label, _ in by_cell})
    missing = [label for label in labels if (label, baseline_regime) not in by_cell]
    if missing:
        raise ConfigurationError(
            f"baseline regime {baseline_regime!r} has no records for cells: {missing}"
        )
    rows = []
    for label in labels:
        base = by_cell[(label, baseline_regime)]
        for (lbl, regime), cell in sorted(by_cell.items()):
            if lbl != label:
                continue
            delta = cell["mean"] - base["mean"]
            rows.append(
                {
                    "model": label,
                    "regime": regime,
                    "config_hash": cell["config_hash"],
                    "seeds": len(cell["maps"]),
                    "mAP_mean": fmt100(cell["mean"]),
                    "mAP_spread": f"{fmt100(cell['lo'])}-{fmt100(cell['hi'])}",
                    "delta_vs_baseline": f"{100.0 * delta:+.1f}",
                    "trained_pct": f"{100.0 * cell['trained_fraction']:.1f}",
                }
            )
    report_dir = Path(out_dir) / "reports"
    report_dir.mkdir(parents=True, exist_ok=True)
    _write_report_csv(rows, report_dir / "comparison.csv")
    table = _render_report_table(rows, baseline_regime)
    (report_dir / "comparison.txt").write_text(table)
    _write_curves(by_cell, labels, baseline_regime, report_dir)
    return table, rows


def _write_report_csv(rows, path):
    import csv

    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)


def _render_report_table(rows, baseline_regime):
    header = (
        f"{'model':<28} {'regime':<20} {'mAP':>6} {'spread':>12} "
        f"{'d vs ' + baseline_regime:>14} {'trained %':>10} {'config':>18}"
    )
    lines = [header, "-" * len(header)]
    for r in rows:
        lines.append(
            f"{r['model']:<28} {r['regime']:<20} {r['mAP_mean']:>6} {r['mAP_spread']:>12} "
            f"{r['delta_vs_baseline']:>14} {r['trained_pct']:>10} {r['config_hash']:>18}"
        )
    return "\n".join(lines) + "\n"


def _mean_per_class(recs):
    classes = recs[0]["eval_report"]["per_class_ap"].keys()
    out = {}
    for c in classes:
        vals = [r["eval_report"]["per_class_ap"][c] for r in recs]
        vals = [v for v in vals if v is not None]
        out[int(c)] = math.fsum(vals) / len(vals) if vals else 0.0
    return out


def _write_curves(by_cell, labels, baseline_regime, report_dir):
    for label in labels:
        base = by_cell[(label, baseline_regime)]
        base_report = EvalReport(per_class_ap=_mean_per_class(base["records"]))
        counts = {
            int(k): v for k, v in base["records"][0].get("train_annotation_counts", {}).items()
        }
        for (lbl, regime), cell in by_cell.items():
            if lbl != label or regime == baseline_regime:
                continue
            cell_report = EvalReport(per_class_ap=_mean_per_class(cell["records"]))
            if set(cell_report.per_class_ap) != set(base_report.per_class_ap) or not counts:
                continue
            rows = classwise_relative_curve(cell_report, base_report, counts, sigma=1000.0)
            write_curve_csv(rows, report_dir / f"curve_{label}_{regime}_vs_{baseline_regime}.csv")
