"""Command-line surface: generate / train / eval / report.

Exit codes: 0 success, 2 validation error (bad config, missing or
mismatched inputs), 3 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import shutil
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, ExperimentConfig
from .dataio import (
    DirectoryDataset,
    format_detections,
    parse_detections,
    write_dataset,
)
from .detector import DetectConfig, Detector
from .evalkit import (
    DIFFICULTIES,
    HEIGHT_BUCKETS,
    average_precision,
    categorize_false_positives,
    evaluate_images,
    log_average_miss_rate,
    recall_at_precision,
)
from .trainer import (
    CheckpointMismatch,
    TrainingDiverged,
    load_checkpoint,
    read_checkpoint_manifest,
    run_training,
    stage_plan_for_mode,
)

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_RUNTIME = 3


def _scene_fingerprint(config: ExperimentConfig) -> str:
    """Fingerprint of the scene-content keys only, so training seeds can
    vary over a pinned dataset."""
    keys = sorted(k for k in config.values if k.startswith("scene."))
    payload = json.dumps({k: config.values[k] for k in keys}, sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()


def _load_config(args) -> ExperimentConfig:
    cfg = (
        ExperimentConfig.from_file(args.config)
        if getattr(args, "config", None)
        else ExperimentConfig()
    )
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_overrides(seed=args.seed)
    return cfg


def cmd_generate(args) -> int:
    config = _load_config(args)
    out = Path(args.out)
    if out.exists() and any(out.iterdir()):
        if not args.force:
            raise ConfigError(f"output directory {out} is not empty (use --force)")
        shutil.rmtree(out)
    count = args.count if args.count is not None else config["dataset.count"]
    channels = tuple(config["dataset.channels"])
    manifest = write_dataset(
        out,
        config.scene_config(),
        count,
        channels=channels,
        fingerprint=_scene_fingerprint(config),
    )
    print(f"wrote {manifest['count']} images to {out} "
          f"(channels: {', '.join(manifest['channels'])})")
    return EXIT_OK


def _dataset_kinds(config: ExperimentConfig) -> tuple[str | None, str | None]:
    mode = config["mode"]
    supervisor = config["channel"] if mode == "hyperlearner" else None
    channel_input = config["channel"] if mode == "side_branch" else None
    return supervisor, channel_input


def cmd_train(args) -> int:
    config = _load_config(args)
    dataset_dir = args.dataset or config["dataset.train_dir"]
    if dataset_dir is None:
        raise ConfigError("no dataset: pass a dataset directory or set dataset.train_dir")
    manifest_path = Path(dataset_dir) / "manifest.json"
    if manifest_path.exists():
        manifest = json.loads(manifest_path.read_text())
        if manifest.get("fingerprint") and manifest["fingerprint"] != _scene_fingerprint(config):
            raise ConfigError(
                f"dataset at {dataset_dir} was generated from a different scene config"
            )
    supervisor, channel_input = _dataset_kinds(config)
    dataset = DirectoryDataset(dataset_dir, supervisor_kind=supervisor,
                               input_kind=channel_input)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model = Detector(config.detector_config())
    plan = stage_plan_for_mode(
        config["mode"],
        config.stage_plan_options(),
        decay_iterations=config["train.decay_iterations"],
        decay_learning_rate=config["train.decay_learning_rate"],
    )
    ckpt = out / "checkpoint.ckpt"
    log = run_training(
        model,
        dataset,
        plan,
        config.train_options(),
        checkpoint_path=ckpt,
        fingerprint=config.fingerprint(),
        resume=args.resume,
        config_values=config.values,
    )
    with (out / "loss_log.csv").open("w", newline="") as fh:
        writer = csv.DictWriter(
            fh, fieldnames=["stage", "iteration", "total", "cfn", "rpn_cls",
                            "rpn_bbox", "frcnn_cls", "frcnn_bbox"])
        writer.writeheader()
        writer.writerows(log)
    (out / "run_manifest.json").write_text(
        json.dumps(
            {
                "mode": config["mode"],
                "channel": config["channel"],
                "seed": config["seed"],
                "fingerprint": config.fingerprint(),
                "dataset": str(dataset_dir),
                "stages": [s.name for s in plan],
                "config_values": config.values,
            },
            indent=1,
            sort_keys=True,
        )
    )
    print(f"trained mode={config['mode']} over {len(dataset)} images; "
          f"checkpoint at {ckpt}")
    return EXIT_OK


def _model_from_checkpoint(path: str) -> tuple[Detector, ExperimentConfig]:
    manifest = read_checkpoint_manifest(path)
    values = manifest.get("config_values")
    if values is None:
        raise ConfigError(f"checkpoint {path} carries no config; cannot rebuild the model")
    config = ExperimentConfig(values)
    model = Detector(config.detector_config())
    load_checkpoint(path, model, config.fingerprint())
    return model, config


def _cfn_accuracy(model: Detector, dataset: DirectoryDataset) -> float | None:
    import torch

    if model.cfn is None or dataset.supervisor_kind is None:
        return None
    correct = total = 0
    for i in range(len(dataset)):
        sample = dataset[i]
        with torch.no_grad():
            image_t = model.image_to_tensor(sample.image)
            _, agg = model.forward_features(image_t)
            pred = model.predict_channel(agg, sample.image.shape[-2:]).numpy()
        sup = sample.supervisor
        if sup.kind == "multiclass":
            want = sup.data[0].astype(np.int64)
            got = pred.argmax(axis=0)
        elif sup.kind == "binary":
            want = sup.data[0] > 0.5
            got = pred[0] > 0.5
        else:
            return None
        correct += int((want == got).sum())
        total += want.size
    return correct / total if total else None


def cmd_eval(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model = None
    config = None
    if args.detections is None:
        if args.checkpoint is None:
            raise ConfigError("eval needs a checkpoint or --detections")
        model, config = _model_from_checkpoint(args.checkpoint)

    supervisor = config["channel"] if config and config["mode"] == "hyperlearner" else None
    channel_input = config["channel"] if config and config["mode"] == "side_branch" else None
    try:
        dataset = DirectoryDataset(args.dataset, supervisor_kind=supervisor,
                                   input_kind=channel_input)
    except (FileNotFoundError, ValueError) as e:
        raise ConfigError(str(e)) from e

    per_image_dets = []
    per_image_gts = []
    det_dir = out / "detections"
    det_dir.mkdir(exist_ok=True)
    det_cfg = None
    if config is not None:
        det_cfg = DetectConfig(
            score_floor=config["eval.score_floor"],
            nms_thresh=config["eval.nms_thresh"],
            proposal_count=config["eval.proposal_count"],
        )
    from .heads import PEDESTRIAN

    for i, stem in enumerate(dataset.ids):
        gts = dataset.annotations(i)
        per_image_gts.append(gts)
        if model is not None:
            sample = dataset[i]
            dets = model.detect(sample.image, sample.channel_input, det_cfg)
            (det_dir / f"{stem}.txt").write_text(format_detections(dets))
        else:
            det_file = Path(args.detections) / f"{stem}.txt"
            dets = parse_detections(det_file.read_text()) if det_file.exists() else []
        # pedestrian is the evaluated class; cyclist outputs are confusion
        # products and do not enter the pedestrian metrics
        per_image_dets.append([d for d in dets if d.class_id == PEDESTRIAN])

    difficulties = (
        [DIFFICULTIES[args.difficulty]] if args.difficulty else list(DIFFICULTIES.values())
    )
    metrics: dict = {"ap": {}, "gt_counts": {}}
    moderate_pack = None
    for diff in difficulties:
        curve, heights, scores, _ = evaluate_images(
            per_image_dets, per_image_gts, diff, args.iou_thresh
        )
        metrics["gt_counts"][diff.name] = curve.gt_count
        metrics["ap"][diff.name] = (
            average_precision(curve) if curve.gt_count else None
        )
        if diff.name == "moderate":
            moderate_pack = (curve, heights, scores)

    if moderate_pack is not None:
        curve, heights, scores = moderate_pack
        if curve.gt_count:
            metrics["mr_minus2"] = log_average_miss_rate(curve, len(dataset), -2.0)
            metrics["mr_minus4"] = log_average_miss_rate(curve, len(dataset), -4.0)
            rep = recall_at_precision(curve, heights, scores, 0.7)
            metrics["recall_at_70_precision"] = {
                "threshold": rep.threshold,
                "achieved_precision": rep.achieved_precision,
                "overall": rep.overall_recall,
                "buckets": {f"({b[0]:g},{b[1]:g}]": rep.bucket_recall[b] for b in HEIGHT_BUCKETS},
            }
            all_dets = [d for dets in per_image_dets for d in dets]
            all_gts = [g for gts in per_image_gts for g in gts]
            metrics["fp_top200"] = categorize_false_positives(
                all_dets, all_gts, top_n=200).as_dict()
            try:
                metrics["fp_at_70_recall"] = categorize_false_positives(
                    all_dets, all_gts, recall_point=0.7).as_dict()
            except ValueError:
                metrics["fp_at_70_recall"] = None
        # PR curve CSV at the standard difficulty
        with (out / "pr_curve.csv").open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["threshold", "tp", "fp", "precision", "recall"])
            if curve.thresholds.size:
                for t, tp_v, fp_v, p, r in zip(
                    curve.thresholds, curve.tp, curve.fp, curve.precision(), curve.recall()
                ):
                    writer.writerow([f"{t:.6f}", int(tp_v), int(fp_v), f"{p:.6f}", f"{r:.6f}"])
        # recall-by-height table (one row per model, bucket columns)
        rec = metrics.get("recall_at_70_precision")
        with (out / "recall_table.csv").open("w", newline="") as fh:
            writer = csv.writer(fh)
            headers = [f"({b[0]:g},{b[1]:g}]" for b in HEIGHT_BUCKETS] + ["all scales"]
            writer.writerow(["Model"] + headers)
            if rec:
                cells = [rec["buckets"][h] for h in headers[:-1]] + [rec["overall"]]
                writer.writerow(
                    ["this-run"] + [f"{100 * c:.1f}%" if c is not None else "n/a"
                                    for c in cells]
                )
        # false-positive breakdown (rows: selection mode; columns: categories)
        with (out / "fp_breakdown.csv").open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["selection", "localization", "background", "cyclist",
                             "annotation"])
            for key, label in (("fp_at_70_recall", "at-70%-recall"),
                               ("fp_top200", "top-200")):
                bd = metrics.get(key)
                if bd:
                    writer.writerow([label, bd["localization"], bd["background"],
                                     bd["cyclist"], bd["annotation"]])
        with (out / "mr_summary.csv").open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["metric", "value"])
            for key in ("mr_minus2", "mr_minus4"):
                if key in metrics:
                    writer.writerow([key, f"{metrics[key]:.6f}"])

    if model is not None:
        acc = _cfn_accuracy(model, dataset)
        if acc is not None:
            metrics["cfn_pixel_accuracy"] = acc

    (out / "metrics.json").write_text(json.dumps(metrics, indent=1, sort_keys=True))
    # summary table, columns in Mod / Easy / Hard order
    with (out / "report.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["Metric", "Mod", "Easy", "Hard"])
        row = ["AP"]
        for name in ("moderate", "easy", "hard"):
            ap = metrics["ap"].get(name)
            row.append(f"{100 * ap:.2f}" if ap is not None else "n/a")
        writer.writerow(row)
    ap_str = ", ".join(
        f"{name}={100 * metrics['ap'][name]:.2f}" if metrics["ap"].get(name) is not None
        else f"{name}=n/a"
        for name in ("moderate", "easy", "hard")
    )
    print(f"AP({ap_str})  ->  {out / 'metrics.json'}")
    return EXIT_OK


def cmd_report(args) -> int:
    runs = []
    for d in args.runs:
        metrics_path = Path(d) / "metrics.json"
        if not metrics_path.exists():
            raise ConfigError(f"{d} has no metrics.json (run eval first)")
        runs.append((Path(d).name or str(d), json.loads(metrics_path.read_text())))
    baseline_name = args.baseline or runs[0][0]
    baseline = next((m for n, m in runs if n == baseline_name), None)
    if baseline is None:
        raise ConfigError(f"baseline run {baseline_name!r} not among {[n for n, _ in runs]}")

    order = ("moderate", "easy", "hard")
    header = ["Model", "Mod", "Easy", "Hard"]
    with_deltas = len(runs) > 1
    if with_deltas:
        header += ["dMod", "dEasy", "dHard", "dAvg"]
    rows = [header]
    for name, m in runs:
        row = [name]
        aps = [m["ap"].get(k) for k in order]
        row += [f"{100 * a:.2f}" if a is not None else "n/a" for a in aps]
        if with_deltas:
            deltas = []
            for k, a in zip(order, aps):
                b = baseline["ap"].get(k)
                deltas.append(100 * (a - b) if a is not None and b is not None else None)
            row += [f"{d:+.2f}" if d is not None else "n/a" for d in deltas]
            valid = [d for d in deltas if d is not None]
            row.append(f"{sum(valid) / len(valid):+.2f}" if valid else "n/a")
        rows.append(row)

    widths = [max(len(r[i]) for r in rows) for i in range(len(header))]
    for r in rows:
        print("  ".join(v.ljust(w) for v, w in zip(r, widths)).rstrip())
    if args.out:
        with open(args.out, "w", newline="") as fh:
            csv.writer(fh).writerows(rows)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="chandet",
        description="channel-feature pedestrian detection experiments on a synthetic world",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="generate a dataset directory")
    p.add_argument("--config", help="experiment config file")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--count", type=int, help="number of images (overrides dataset.count)")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--force", action="store_true", help="overwrite a non-empty directory")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train a detector")
    p.add_argument("--config", help="experiment config file")
    p.add_argument("--dataset", help="dataset directory (else dataset.train_dir)")
    p.add_argument("--out", required=True, help="run directory for checkpoint and logs")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--resume", action="store_true", help="resume from the run checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint (or detection files) on a dataset")
    p.add_argument("checkpoint", nargs="?", help="checkpoint file from train")
    p.add_argument("dataset", help="dataset directory")
    p.add_argument("--detections", help="evaluate pre-computed detection files instead")
    p.add_argument("--difficulty", choices=sorted(DIFFICULTIES),
                   help="restrict to one difficulty (default: all)")
    p.add_argument("--iou-thresh", type=float, default=0.5)
    p.add_argument("--out", required=True, help="output directory for metrics and curves")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="compare eval outputs side by side")
    p.add_argument("runs", nargs="+", help="eval output directories")
    p.add_argument("--baseline", help="name of the baseline run (default: first)")
    p.add_argument("--out", help="also write the table as CSV")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, CheckpointMismatch, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except (TrainingDiverged, RuntimeError, OSError) as e:
        print(f"runtime failure: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
