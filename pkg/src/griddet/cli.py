"""Command-line surface: build, profile, infer, eval, bench, augment,
gradcheck, toyfit.

Configs are strict JSON (unknown keys are hard errors); `--set key=value`
overrides dotted config fields. Every run writes a run manifest (atomically,
at the end) so it can be replayed byte-for-byte; all emitted JSON carries a
schema_version. Exit codes: 0 ok, 2 config error, 3 data error, 4 internal
invariant violation. GRIDDET_JOBS sets the default frame-level parallelism.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import csv
import json
import os
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__, autodiff, budget, decode, metrics, network
from .augment import (AugmentConfig, AugmentConfigError, apply_global,
                      build_gt_database, drop_frames, load_gt_database,
                      paste_samples, save_gt_database)
from .lidar_io import (DataError, PointCloud, SequenceManifest, crop_range,
                       assemble_frames, load_labels, load_manifest,
                       load_point_file, save_labels, save_manifest,
                       save_point_file)
from .network import ConfigError, ModelConfig, build_model, load_model, save_model

SCHEMA_VERSION = 1
GRADCHECK_TOL = 1e-4


def _default_jobs() -> int:
    try:
        return max(1, int(os.environ.get("GRIDDET_JOBS", "1")))
    except ValueError:
        return 1


def _fail(code: int, kind: str, exc: Exception) -> int:
    sys.stderr.write(json.dumps({
        "schema_version": SCHEMA_VERSION,
        "error": kind,
        "message": str(exc),
    }) + "\n")
    return code


def _write_json(path: Path, obj: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2) + "\n", encoding="utf-8")


def _write_manifest(out_dir: Path, command: str, args: argparse.Namespace,
                    inputs: list[str], started: float) -> None:
    """Atomic run manifest: replaying the recorded command and inputs must
    reproduce outputs byte-for-byte (timestamps excluded)."""
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "command": command,
        "config": getattr(args, "config", None),
        "inputs": inputs,
        "output_dir": str(out_dir),
        "seed": getattr(args, "seed", None),
        "set_overrides": getattr(args, "set", None) or [],
        "tool_version": __version__,
        "started_unix": started,
        "finished_unix": time.time(),
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    tmp = out_dir / "run_manifest.json.tmp"
    tmp.write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    os.replace(tmp, out_dir / "run_manifest.json")


def _apply_overrides(obj: dict, overrides: list[str]) -> dict:
    """Apply --set dotted.key=value pairs; values parse as JSON when valid."""
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = obj
        parts = key.split(".")
        for part in parts[:-1]:
            if part not in node or not isinstance(node[part], dict):
                node[part] = {}
            node = node[part]
        node[parts[-1]] = value
    return obj


def _load_model_config(args) -> ModelConfig:
    if getattr(args, "preset", None):
        try:
            kind, tier = args.preset.split("-")
        except ValueError:
            raise ConfigError(f"preset must look like pillar-B, got {args.preset!r}")
        config_obj = budget.preset_config(kind, tier).to_json()
    elif getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise DataError(f"config file not found: {path}")
        try:
            config_obj = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    else:
        raise ConfigError("either --config or --preset is required")
    _apply_overrides(config_obj, getattr(args, "set", None))
    return ModelConfig.from_json(config_obj)


def _load_scene(args, model: network.Model) -> PointCloud:
    if getattr(args, "scene", None):
        cloud = load_point_file(args.scene)
    else:
        cloud = budget.make_profiling_scene()
    return crop_range(cloud, model.config.grid)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_build(args) -> int:
    started = time.time()
    config = _load_model_config(args)
    model = build_model(config)
    out_dir = Path(args.out)
    save_model(model, out_dir)
    _write_manifest(out_dir, "build", args, [args.config or args.preset], started)
    per_layer, total = budget.count_params(model)
    print(f"built model with {len(model.layers)} layers, "
          f"{total / 1e6:.2f}M params -> {out_dir}")
    return 0


def cmd_profile(args) -> int:
    started = time.time()
    model = load_model(args.model)
    cloud = _load_scene(args, model)
    stats, total_flops = budget.count_flops(model, cloud)
    report = budget.profile_report(model, stats, total_flops)
    report["scene_points"] = len(cloud)
    out_dir = Path(args.out)
    _write_json(out_dir / "profile.json", report)
    table = budget.format_profile_table(model, total_flops)
    (out_dir / "profile_table.txt").write_text(table + "\n", encoding="utf-8")
    _write_manifest(out_dir, "profile", args, [str(args.model)], started)
    print(table)
    return 0


def cmd_infer(args) -> int:
    started = time.time()
    model = load_model(args.model)
    manifest = load_manifest(args.frames)
    grid = decode.OutputGrid.for_model(model.config)
    nms = dict(decode.DEFAULT_NMS_THRESHOLDS)

    def run_frame(i: int) -> tuple[str, list[decode.Detection]]:
        entry = manifest.frames[i]
        cloud = load_point_file(manifest.frame_path(entry), frame_id=entry.frame_id)
        if args.sweeps > 1:
            past = []
            for j in range(1, args.sweeps):
                if i - j < 0:
                    break
                prev = manifest.frames[i - j]
                past.append((load_point_file(manifest.frame_path(prev),
                                             frame_id=prev.frame_id), prev.pose))
            cloud = assemble_frames(cloud, past, entry.pose, args.sweeps,
                                    frame_gap=manifest.frame_gap)
        cloud = crop_range(cloud, model.config.grid)
        head = network.forward(model, cloud)
        dets = decode.decode_head_output(head, grid, max_k=args.max_k,
                                         threshold=args.threshold,
                                         nms_thresholds=nms)
        return entry.frame_id, dets

    jobs = args.jobs
    indices = range(len(manifest.frames))
    if jobs > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(run_frame, indices))
    else:
        results = [run_frame(i) for i in indices]

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    decode.save_detections(results, out_dir / "detections.jsonl")
    _write_manifest(out_dir, "infer", args, [str(args.model), str(args.frames)], started)
    n = sum(len(d) for _, d in results)
    print(f"{len(results)} frames -> {n} detections -> {out_dir / 'detections.jsonl'}")
    return 0


def _load_eval_config(args) -> metrics.EvalConfig:
    obj = {}
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise DataError(f"eval config not found: {path}")
        obj = json.loads(path.read_text(encoding="utf-8"))
        obj.pop("schema_version", None)
    _apply_overrides(obj, getattr(args, "set", None))
    known = {"iou_kind", "iou_thresholds", "difficulty", "recall_points",
             "x_range", "y_range"}
    unknown = set(obj) - known
    if unknown:
        raise ConfigError(f"unknown eval config keys: {sorted(unknown)}")
    try:
        return metrics.EvalConfig(
            iou_kind=obj.get("iou_kind", "bev"),
            iou_thresholds=dict(obj.get("iou_thresholds",
                                        metrics.DEFAULT_IOU_THRESHOLDS)),
            difficulty=obj.get("difficulty", "L2"),
            recall_points=int(obj.get("recall_points", 101)),
            x_range=tuple(obj["x_range"]) if obj.get("x_range") else None,
            y_range=tuple(obj["y_range"]) if obj.get("y_range") else None,
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def cmd_eval(args) -> int:
    started = time.time()
    config = _load_eval_config(args)
    det_pairs = decode.load_detections(args.detections)
    labels = load_labels(args.labels)
    frames: dict[str, tuple[list, list]] = {}
    for frame_id, det in det_pairs:
        frames.setdefault(frame_id, ([], []))[0].append(det)
    for lab in labels:
        frames.setdefault(lab.frame_id, ([], []))[1].append(lab)
    matched = [metrics.match_frame(dets, labs, config)
               for dets, labs in frames.values()]
    result = metrics.compute_ap_aph(matched, config)
    out_dir = Path(args.out)
    _write_json(out_dir / "eval.json", result.to_json())
    table = metrics.format_report(result)
    (out_dir / "eval_table.txt").write_text(table + "\n", encoding="utf-8")
    _write_manifest(out_dir, "eval", args,
                    [str(args.detections), str(args.labels)], started)
    print(table)
    return 0


def cmd_bench(args) -> int:
    started = time.time()
    model = load_model(args.model)
    cloud = _load_scene(args, model)
    report = budget.benchmark(model, cloud, warmup=args.warmup, iters=args.iters)
    report["scene_points"] = len(cloud)
    out_dir = Path(args.out)
    _write_json(out_dir / "bench.json", report)
    _write_manifest(out_dir, "bench", args, [str(args.model)], started)
    print(f"mean {report['mean_ms']:.1f} ms | median {report['median_ms']:.1f} ms "
          f"| p95 {report['p95_ms']:.1f} ms over {args.iters} iters")
    return 0


def cmd_augment(args) -> int:
    started = time.time()
    path = Path(args.aug_config)
    if not path.exists():
        raise DataError(f"augment config not found: {path}")
    config = AugmentConfig.from_json(json.loads(path.read_text(encoding="utf-8")))
    manifest = load_manifest(args.frames)
    db = load_gt_database(config.paste.db_path) if config.paste is not None else None
    out_dir = Path(args.out)
    (out_dir / "points").mkdir(parents=True, exist_ok=True)
    all_labels = []
    out_frames = []
    for i, entry in enumerate(manifest.frames):
        cloud = load_point_file(manifest.frame_path(entry), frame_id=entry.frame_id)
        labels = load_labels(manifest.root / entry.labels_path) if entry.labels_path else []
        labels = [lab for lab in labels if lab.frame_id in ("", entry.frame_id)]
        frame_seed = (args.seed * 1_000_003 + i) & 0xFFFFFFFF
        if db is not None:
            cloud, labels = paste_samples(cloud, labels, db, config, args.epoch,
                                          seed=frame_seed ^ 0x5A5A)
        cloud, labels = apply_global(cloud, labels, config, seed=frame_seed)
        rel = f"points/{entry.frame_id}.bin"
        save_point_file(cloud, out_dir / rel)
        for lab in labels:
            lab.frame_id = entry.frame_id
        all_labels.extend(labels)
        out_frames.append(type(entry)(frame_id=entry.frame_id, path=rel,
                                      timestamp=entry.timestamp, pose=entry.pose,
                                      labels_path="labels.jsonl"))
    save_labels(all_labels, out_dir / "labels.jsonl")
    save_manifest(SequenceManifest(frames=out_frames, frame_gap=manifest.frame_gap,
                                   root=out_dir), out_dir / "manifest.json")
    _write_manifest(out_dir, "augment", args,
                    [str(args.frames), str(args.aug_config)], started)
    print(f"augmented {len(out_frames)} frames -> {out_dir}")
    return 0


def cmd_gradcheck(args) -> int:
    worst = {}
    for op in autodiff.GRADCHECK_OPS:
        errs = [autodiff.gradcheck_op(op, seed) for seed in range(args.seeds)]
        worst[op] = max(errs)
        print(f"{op:<22} max rel err {worst[op]:.3e} over {args.seeds} seeds")
    if args.out:
        _write_json(Path(args.out) / "gradcheck.json",
                    {"schema_version": SCHEMA_VERSION, "seeds": args.seeds,
                     "tolerance": GRADCHECK_TOL,
                     "max_rel_err": {k: float(v) for k, v in worst.items()}})
    if any(v > GRADCHECK_TOL for v in worst.values()):
        raise RuntimeError(f"gradient check exceeded tolerance {GRADCHECK_TOL}")
    return 0


def cmd_toyfit(args) -> int:
    started = time.time()
    scene = autodiff.make_toy_scene()
    trace, _ = autodiff.toy_fit(scene, steps=args.steps, lr=args.lr, seed=args.seed)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "loss_trace.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss"])
        for i, v in enumerate(trace):
            writer.writerow([i, f"{v:.9f}"])
    _write_manifest(out_dir, "toyfit", args, [], started)
    print(f"loss {trace[0]:.4f} -> {trace[-1]:.6f} "
          f"({trace[0] / max(trace[-1], 1e-12):.0f}x) in {len(trace)} steps")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="griddet",
                                     description="Grid-based LiDAR 3D detection toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed=False):
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--set", action="append", default=[],
                       help="override a config field: dotted.key=value")
        if seed:
            p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("build", help="realize a model config into weights")
    p.add_argument("--config", help="model config JSON")
    p.add_argument("--preset", help="encoder-tier preset, e.g. pillar-B")
    common(p)
    p.set_defaults(func=cmd_build)

    p = sub.add_parser("profile", help="per-layer params/FLOPs on a scene")
    p.add_argument("--model", required=True, help="model directory")
    p.add_argument("--scene", help="point file (default: canonical scene)")
    common(p)
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser("infer", help="run detection over a frames manifest")
    p.add_argument("--model", required=True)
    p.add_argument("--frames", required=True, help="sequence manifest JSON")
    p.add_argument("--sweeps", type=int, default=1, help="sweeps per frame")
    p.add_argument("--max-k", type=int, default=decode.DEFAULT_MAX_K)
    p.add_argument("--threshold", type=float, default=decode.DEFAULT_THRESHOLD)
    p.add_argument("--jobs", type=int, default=_default_jobs())
    common(p, seed=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="AP/APH from detections + labels JSONL")
    p.add_argument("--detections", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--config", help="eval config JSON")
    common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="wall-clock latency of the forward pass")
    p.add_argument("--model", required=True)
    p.add_argument("--scene")
    p.add_argument("--warmup", type=int, default=2)
    p.add_argument("--iters", type=int, default=10)
    common(p)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("augment", help="apply training-time augmentations")
    p.add_argument("--frames", required=True, help="sequence manifest JSON")
    p.add_argument("--aug-config", required=True)
    p.add_argument("--epoch", type=int, default=0)
    common(p, seed=True)
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p.add_argument("--seeds", type=int, default=10)
    p.add_argument("--out", help="optional report directory")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("toyfit", help="overfit the shipped toy scene")
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--lr", type=float, default=0.01)
    common(p, seed=True)
    p.set_defaults(func=cmd_toyfit)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, AugmentConfigError) as exc:
        return _fail(2, "config_error", exc)
    except DataError as exc:
        return _fail(3, "data_error", exc)
    except Exception as exc:  # noqa: BLE001 - surface as invariant violation
        return _fail(4, "internal_error", exc)


if __name__ == "__main__":
    sys.exit(main())
