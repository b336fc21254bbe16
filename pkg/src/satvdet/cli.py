"""Command-line front end.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
Every run writes a JSON run manifest next to its outputs.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import tempfile
import time
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import __version__, dataio, evaluation, models, overlay, pipeline, postprocess, registration, synth, \
    targets, trainer
from .dataio import DataError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

# detection and evaluation defaults for the two operating regimes
PRESETS = {
    "lasvegas": dict(tile=200, sigma=1.0, theta=8.0, alpha_o=3.5, alpha_n=0.35, c=3),
    "khartoum": dict(tile=128, sigma=1.0, theta=4.0, alpha_o=3.5, alpha_n=0.40, c=3),
}
DEFAULT_PRESET = "khartoum"


class UsageError(Exception):
    """Bad command-line arguments."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ------------------------------------------------------------------ manifest

def manifest_path(output: Path) -> Path:
    output = Path(output)
    if output.is_dir():
        return output / "run_manifest.json"
    return output.with_name(output.name + ".manifest.json")


def write_run_manifest(output: Path, args: argparse.Namespace, resolved: dict, inputs: dict, outputs: dict,
                       wall_time: float) -> Path:
    """Write the manifest via a temporary file and an atomic rename."""
    path = manifest_path(output)
    path.parent.mkdir(parents=True, exist_ok=True)
    record = {
        "subcommand": args.command,
        "config": {k: _jsonable(v) for k, v in sorted(resolved.items())},
        "inputs": {k: str(v) for k, v in inputs.items()},
        "outputs": {k: str(v) for k, v in outputs.items()},
        "seed": args.seed,
        "version": __version__,
        "wall_time": round(wall_time, 3),
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    }
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".manifest-", suffix=".tmp")
    with os.fdopen(fd, "w", encoding="utf-8") as fh:
        json.dump(record, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)
    return path


def _jsonable(v):
    if isinstance(v, Path):
        return str(v)
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    return v


# ------------------------------------------------------------------- helpers

def _preset_value(args, name):
    value = getattr(args, name, None)
    return PRESETS[args.preset][name] if value is None else value


def _parse_size(text: str) -> tuple[int, int]:
    try:
        h, w = (int(t) for t in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"size must look like HxW, got {text!r}") from None
    if h < 1 or w < 1:
        raise argparse.ArgumentTypeError("size must be positive")
    return h, w


def _load_dataset(directory: Path):
    """Frames, annotations and manifest values of a dataset directory."""
    directory = Path(directory)
    mpath = directory / "manifest.txt"
    if not mpath.exists():
        raise DataError(f"{directory}: no manifest.txt")
    manifest = dataio.read_manifest(mpath)
    frames = dataio.read_frames(directory, manifest.get("frame_glob", "frames/*.png"))
    ann_path = directory / manifest.get("annotations", "annotations.csv")
    ann = dataio.load_annotations(ann_path, frames.shape[1:]) if ann_path.exists() else dataio.PointAnnotations()
    return frames, ann, manifest


def _require_track_ids(ann: dataio.PointAnnotations, moving_only: bool) -> bool:
    return moving_only and ann.track_id is not None


def _dataset_samples(args, directory, c, k, tile):
    frames, ann, _ = _load_dataset(directory)
    moving = _require_track_ids(ann, not args.all_vehicles)
    return pipeline.frame_samples(frames, ann, c, k, tile, moving_only=moving, margin=args.margin)


def _train_config(args, c) -> trainer.TrainConfig:
    return trainer.TrainConfig(model=args.model, channels=c, lr=args.lr, batch_size=args.batch_size,
                               patience=args.patience, max_epochs=args.epochs, augmentation=args.augment,
                               seed=args.seed, sigma=_preset_value(args, "sigma"), width=args.width)


# --------------------------------------------------------------- subcommands

def cmd_synth(args):
    make = synth.dense_traffic if args.scenario == "dense" else synth.ScenarioSpec
    kw = dict(height=args.size[0], width=args.size[1], n_frames=args.frames, seed=args.seed)
    if args.vehicles is not None:
        kw["n_vehicles"] = args.vehicles
    spec = make(**kw)
    out = Path(args.out)
    if args.domain_pair:
        a, b = synth.domain_pair(spec)
        synth.write_dataset(out / "domain_a", a, c=args.c, k=args.k, theta=args.theta)
        synth.write_dataset(out / "domain_b", b, c=args.c, k=args.k, theta=args.theta)
    else:
        synth.write_dataset(out, synth.generate(spec), c=args.c, k=args.k, theta=args.theta)
    return out, asdict(spec), {}, {"dataset": out}


def cmd_register(args):
    src = Path(args.data)
    frames, ann, manifest = _load_dataset(src)
    params = registration.RegistrationParams(seed=args.seed)
    out = Path(args.out)
    results = registration.register_sequence(frames, args.reference, params)
    warped = np.stack([w for w, _, _ in results])
    dataio.write_frames(out / "frames", warped)
    registration.save_homographies(out / "homographies.txt", [H for _, H, _ in results])
    dataio.save_annotations(out / "annotations.csv", ann)
    manifest = dict(manifest, frame_glob="frames/*.png", annotations="annotations.csv",
                    homographies="homographies.txt", registered="estimated")
    dataio.write_manifest(out / "manifest.txt", manifest)
    return out, {"reference": args.reference, **asdict(params)}, {"data": src}, {"dataset": out}


def cmd_targets(args):
    ann = dataio.load_annotations(args.ann, args.size)
    spec = targets.target_spec_for(args.model, _preset_value(args, "sigma"))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for f in ann.frames():
        hm = targets.render(ann.for_frame(int(f)), spec, args.size)
        np.save(out / f"heatmap_{int(f):05d}.npy", hm)
    return out, {"model": args.model, "sigma": spec.sigma, "size": list(args.size)}, {"ann": args.ann}, \
        {"heatmaps": out}


def cmd_train(args):
    c = _preset_value(args, "c")
    tile = _preset_value(args, "tile")
    samples = _dataset_samples(args, args.data, c, args.k, tile)
    if args.val_data:
        train_s, val_s = samples, _dataset_samples(args, args.val_data, c, args.k, tile)
    else:
        train_s, val_s = dataio.split_train_val(samples, args.val_fraction, args.seed)
    if not train_s:
        raise DataError(f"{args.data}: no training stacks (check c, k and tile size)")
    cfg = _train_config(args, c)
    weights, log = trainer.train(cfg, train_s, val_s)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    models.save(weights, out)
    log.weights_path = str(out)
    log.write(out.with_suffix(".log.txt"))
    resolved = {**asdict(cfg), "k": args.k, "tile": tile, "n_train": len(train_s), "n_val": len(val_s)}
    return out, resolved, {"data": args.data}, {"weights": out, "log": out.with_suffix(".log.txt")}


def cmd_finetune(args):
    c = _preset_value(args, "c")
    tile = _preset_value(args, "tile")
    cfg = _train_config(args, c)
    pretrained = models.load(args.pretrained, expected=cfg.descriptor())
    pool = _dataset_samples(args, args.data, c, args.k, tile)
    if len(pool) < args.samples:
        raise DataError(f"{args.data}: only {len(pool)} stacks available, {args.samples} requested")
    rng = np.random.default_rng(args.seed)
    chosen = [pool[i] for i in rng.choice(len(pool), size=args.samples, replace=False)]
    val = _dataset_samples(args, args.val_data, c, args.k, tile) if args.val_data else None
    weights, log = trainer.fine_tune(pretrained, chosen, cfg, val)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    models.save(weights, out)
    log.weights_path = str(out)
    log.write(out.with_suffix(".log.txt"))
    resolved = {**asdict(cfg), "k": args.k, "tile": tile, "samples": args.samples}
    return out, resolved, {"data": args.data, "pretrained": args.pretrained}, {"weights": out}


def cmd_detect(args):
    weights = models.load(args.weights)
    c = _preset_value(args, "c")
    if weights.descriptor.channels_in != c:
        raise DataError(f"weights expect c={weights.descriptor.channels_in} frames, --c is {c}")
    frames = dataio.read_frames(args.frames, args.pattern)
    cfg = postprocess.PostprocessConfig(args.method, alpha_n=_preset_value(args, "alpha_n"),
                                        alpha_o=_preset_value(args, "alpha_o"))
    per_frame = pipeline.detect_frames(weights, frames, c, args.k, cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    dataio.save_annotations(out, pipeline.annotations_from_detections(per_frame))
    resolved = {"c": c, "k": args.k, **asdict(cfg), "frames_evaluated": sorted(per_frame)}
    return out, resolved, {"weights": args.weights, "frames": args.frames}, {"detections": out}


def _frames_to_score(gt, det, det_path):
    """Frames evaluated: those recorded by `detect`, otherwise the union of both files."""
    mpath = manifest_path(Path(det_path))
    if mpath.exists():
        try:
            recorded = json.loads(mpath.read_text(encoding="utf-8"))["config"]["frames_evaluated"]
            return [int(f) for f in recorded]
        except (KeyError, ValueError):
            pass
    return sorted(set(gt.frames().tolist()) | set(det.frames().tolist()))


def cmd_eval(args):
    theta = _preset_value(args, "theta")
    gt = dataio.load_annotations(args.gt)
    det = dataio.load_annotations(args.det)
    frames = _frames_to_score(gt, det, args.det)
    report = evaluation.match_frames([det.for_frame(f) for f in frames], [gt.for_frame(f) for f in frames], theta)
    out = Path(args.out) if args.out else Path(args.det).with_suffix(".report.txt")
    out.parent.mkdir(parents=True, exist_ok=True)
    report.write(out, out.with_suffix(".json"))
    sys.stdout.write(report.to_text())
    return out, {"theta": theta, "frames": frames}, {"gt": args.gt, "det": args.det}, \
        {"report": out, "summary": out.with_suffix(".json")}


def cmd_grid(args):
    c = _preset_value(args, "c")
    tile = _preset_value(args, "tile")
    try:
        raw = json.loads(Path(args.configs).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"{args.configs}: invalid JSON: {exc}") from exc
    allowed = {f.name for f in fields(trainer.TrainConfig)}
    configs = {}
    for name, values in raw.items():
        unknown = set(values) - allowed
        if unknown:
            raise DataError(f"{args.configs}: config {name!r} has unknown fields {sorted(unknown)}")
        configs[name] = trainer.TrainConfig(**{"channels": c, **values})
    pool = _dataset_samples(args, args.data, c, args.k, tile)
    pool, val = dataio.split_train_val(pool, args.val_fraction, args.seed)
    test = _dataset_samples(args, args.test_data, c, args.k, tile)
    data = trainer.GridData(pool, val, test, _preset_value(args, "theta"), _preset_value(args, "alpha_n"))
    rows = trainer.run_config_grid(configs, data, args.counts, args.repeats, args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    trainer.write_grid_csv(out, rows)
    trainer.write_grid_summary(out.with_suffix(".summary.csv"), rows)
    resolved = {"configs": {k: asdict(v) for k, v in configs.items()}, "counts": args.counts,
                "repeats": args.repeats}
    return out, resolved, {"data": args.data, "test_data": args.test_data}, \
        {"table": out, "summary": out.with_suffix(".summary.csv")}


def cmd_plot(args):
    theta = _preset_value(args, "theta")
    frames = dataio.read_frames(args.frames, args.pattern)
    gt = dataio.load_annotations(args.gt, frames.shape[1:]) if args.gt else dataio.PointAnnotations()
    det = dataio.load_annotations(args.det, frames.shape[1:]) if args.det else dataio.PointAnnotations()
    wanted = args.frame if args.frame else sorted(set(gt.frames().tolist()) | set(det.frames().tolist()))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for f in wanted:
        if not 0 <= f < len(frames):
            raise DataError(f"frame {f} outside the sequence of {len(frames)} frames")
        d, g = det.for_frame(f), gt.for_frame(f)
        rep = evaluation.match(d, g, theta)
        overlay.save_overlay(out / f"overlay_{f:05d}.png", overlay.plot_overlay(frames[f], rep, d, g))
    return out, {"theta": theta, "frames": list(wanted)}, {"frames": args.frames, "gt": args.gt, "det": args.det}, \
        {"overlays": out}


# -------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="seed for every random choice (default 0)")
    common.add_argument("--preset", choices=sorted(PRESETS), default=DEFAULT_PRESET,
                        help="default tile size, sigma, theta and thresholds")

    data_opts = _Parser(add_help=False)
    data_opts.add_argument("--k", type=int, default=1, help="frame skip between stacked frames")
    data_opts.add_argument("--tile", type=int, default=None, help="ROOBI size N")
    data_opts.add_argument("--margin", type=int, default=0, help="border trimmed before tiling")
    data_opts.add_argument("--all-vehicles", action="store_true", help="keep stationary vehicles as labels")

    train_opts = _Parser(add_help=False)
    train_opts.add_argument("--model", choices=["foveanet", "foveanet4sat"], default="foveanet4sat")
    train_opts.add_argument("--c", type=int, default=None, help="frames per stack")
    train_opts.add_argument("--lr", type=float, default=trainer.DEFAULT_LR)
    train_opts.add_argument("--batch-size", type=int, default=trainer.DEFAULT_BATCH)
    train_opts.add_argument("--patience", type=int, default=trainer.DEFAULT_PATIENCE)
    train_opts.add_argument("--epochs", type=int, default=1000, help="maximum epochs")
    train_opts.add_argument("--width", type=float, default=1.0, help="filter-count multiplier")
    train_opts.add_argument("--sigma", type=float, default=None, help="target Gaussian sigma")
    train_opts.add_argument("--augment", action="store_true")
    train_opts.add_argument("--val-data", default=None, help="dataset used for validation")
    train_opts.add_argument("--val-fraction", type=float, default=0.1)

    p = _Parser(prog="satvdet", description="Moving-vehicle detection in satellite video.")
    p.add_argument("--version", action="version", version=f"satvdet {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--size", type=_parse_size, default=(256, 256), help="HxW")
    s.add_argument("--frames", type=int, default=40)
    s.add_argument("--vehicles", type=int, default=None)
    s.add_argument("--scenario", choices=["default", "dense"], default="default")
    s.add_argument("--domain-pair", action="store_true", help="write domain_a/ and domain_b/")
    s.add_argument("--c", type=int, default=3)
    s.add_argument("--k", type=int, default=1)
    s.add_argument("--theta", type=float, default=4.0)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("register", parents=[common], help="register a dataset onto its reference frame")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--reference", type=int, default=0)
    s.set_defaults(func=cmd_register)

    s = sub.add_parser("targets", parents=[common], help="render target heatmaps")
    s.add_argument("--ann", required=True)
    s.add_argument("--size", type=_parse_size, required=True, help="frame size HxW")
    s.add_argument("--model", choices=["foveanet", "foveanet4sat"], default="foveanet4sat")
    s.add_argument("--sigma", type=float, default=None)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_targets)

    s = sub.add_parser("train", parents=[common, data_opts, train_opts], help="train from scratch")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True, help="weights file")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("finetune", parents=[common, data_opts, train_opts], help="fine-tune pretrained weights")
    s.add_argument("--pretrained", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--samples", type=int, required=True, help="number of training stacks")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_finetune)

    s = sub.add_parser("detect", parents=[common], help="detect vehicles in registered frames")
    s.add_argument("--weights", required=True)
    s.add_argument("--frames", required=True)
    s.add_argument("--pattern", default="*.png")
    s.add_argument("--c", type=int, default=None)
    s.add_argument("--k", type=int, default=1)
    s.add_argument("--method", choices=["nms", "otsu"], default="nms")
    s.add_argument("--alpha-n", type=float, default=None)
    s.add_argument("--alpha-o", type=float, default=None)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_detect)

    s = sub.add_parser("eval", parents=[common], help="score detections against ground truth")
    s.add_argument("--gt", required=True)
    s.add_argument("--det", required=True)
    s.add_argument("--theta", type=float, default=None)
    s.add_argument("--out", default=None)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("grid", parents=[common, data_opts], help="run a configuration grid")
    s.add_argument("--configs", required=True, help="JSON object of name -> training fields")
    s.add_argument("--data", required=True)
    s.add_argument("--test-data", required=True)
    s.add_argument("--c", type=int, default=None)
    s.add_argument("--counts", type=int, nargs="+", required=True)
    s.add_argument("--repeats", type=int, default=3)
    s.add_argument("--val-fraction", type=float, default=0.1)
    s.add_argument("--sigma", type=float, default=None)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_grid)

    s = sub.add_parser("plot", parents=[common], help="draw TP/FP/FN overlays")
    s.add_argument("--frames", required=True)
    s.add_argument("--pattern", default="*.png")
    s.add_argument("--gt", default=None)
    s.add_argument("--det", default=None)
    s.add_argument("--theta", type=float, default=None)
    s.add_argument("--frame", type=int, nargs="*", default=None)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    start = time.perf_counter()
    try:
        output, resolved, inputs, outputs = args.func(args)
    except (DataError, models.WeightsFileError, FileNotFoundError, IsADirectoryError, NotADirectoryError) as exc:
        print(f"satvdet {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (trainer.TrainingError, registration.RegistrationError, np.linalg.LinAlgError,
            FloatingPointError) as exc:
        print(f"satvdet {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, models.ModelError) as exc:
        print(f"satvdet {args.command}: invalid arguments: {exc}", file=sys.stderr)
        return EXIT_USAGE
    write_run_manifest(output, args, resolved, inputs, outputs, time.perf_counter() - start)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
