"""``ocularage`` command-line entry point.

Workspace layout (all paths relative to the workspace root)::

    images/                  rendered eye images
    manifest.csv
    preproc/eye/<id>.png     resized eye images
    preproc/iris/<id>_strip.png, <id>_mask.png
    exclusions.csv           segmentation failures
    split.json               subject-exclusive split plus held-out sensor-B subjects
    checkpoints/<modality>.ocag
    history_<modality>.csv
    reports/<modality>/      JSON, CSV and SVG evaluation artifacts
    bench_<modality>.json
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import statistics
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .config import RunConfig, load_config
from .dataman import (Modality, Sensor, SplitAssignment, apply_sensor_model, iter_synth,
                      read_manifest, save_split, subject_exclusive_split, validate_manifest,
                      write_manifest)
from .errors import EmptyDataset, IoError, OcularAgeError, SegmentationFailure, SchemaError
from .evaluation import cross_sensor_eval, evaluate, write_report
from .image import load_png_u8, save_png
from .multitask import SampleSet, train
from .nnet.checkpoint import load_checkpoint, save_checkpoint
from .nnet.network import quantize_fp16
from .preproc import EYE_SIZE, NORM_PRESETS, locate_boundaries, resize, rubber_sheet

log = logging.getLogger("ocularage")

EXCLUSION_COLUMNS = ("sample_id", "image_path", "reason")


# -- synth ------------------------------------------------------------------

def cmd_synth(cfg: RunConfig) -> Path:
    ws = cfg.workspace
    records = []
    try:
        for i, (img, rec, _) in enumerate(iter_synth(cfg.synth)):
            img = apply_sensor_model(img, rec.sensor, seed=cfg.synth.seed * 1_000_003 + i,
                                     noise_sigma=cfg.sensor.noise_sigma, gain=cfg.sensor.gain)
            save_png(ws / rec.image_path, img)
            records.append(rec)
        write_manifest(cfg.manifest_path, records)
    except OSError as exc:
        raise IoError(f"cannot write to workspace {ws}: {exc}") from exc
    log.info("wrote %d images and %s", len(records), cfg.manifest_path)
    return cfg.manifest_path


# -- preprocess -------------------------------------------------------------

def eye_cache_path(ws: Path, sample_id: str) -> Path:
    return ws / "preproc" / "eye" / f"{sample_id}.png"


def iris_cache_paths(ws: Path, sample_id: str) -> tuple[Path, Path]:
    d = ws / "preproc" / "iris"
    return d / f"{sample_id}_strip.png", d / f"{sample_id}_mask.png"


def _preprocess_one(args):
    ws, rec, seg = args
    img = load_png_u8(ws / rec.image_path).astype(np.float32) / 255.0
    eye = resize(img, *EYE_SIZE)
    save_png(eye_cache_path(ws, rec.sample_id), eye)
    try:
        annulus = locate_boundaries(eye, seg)
        annulus.validate(eye.shape[1], eye.shape[0])
        norm = rubber_sheet(eye, annulus)
    except SegmentationFailure as exc:
        return rec.sample_id, rec.image_path, str(exc)
    strip_path, mask_path = iris_cache_paths(ws, rec.sample_id)
    save_png(strip_path, norm.strip)
    save_png(mask_path, norm.mask.astype(np.float32))
    return None


def cmd_preprocess(cfg: RunConfig) -> Path:
    ws = cfg.workspace
    records = read_manifest(cfg.manifest_path)
    validate_manifest(records, ws)
    jobs = [(ws, r, cfg.preproc) for r in records]
    if cfg.workers > 1:
        with ProcessPoolExecutor(cfg.workers) as pool:
            results = list(pool.map(_preprocess_one, jobs, chunksize=16))
    else:
        results = [_preprocess_one(j) for j in jobs]
    failures = [r for r in results if r is not None]
    path = ws / "exclusions.csv"
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(EXCLUSION_COLUMNS)
        w.writerows(failures)
    log.info("preprocessed %d images, %d excluded (%.2f%%)", len(records), len(failures),
             100.0 * len(failures) / max(len(records), 1))
    return path


def read_exclusions(ws: Path) -> set[str]:
    path = ws / "exclusions.csv"
    if not path.exists():
        raise SchemaError(f"{path} missing; run preprocess first")
    with open(path, newline="") as f:
        return {row["sample_id"] for row in csv.DictReader(f)}


# -- split ------------------------------------------------------------------

def cmd_split(cfg: RunConfig) -> Path:
    records = read_manifest(cfg.manifest_path)
    same = [r for r in records if r.sensor is Sensor.A]
    other = sorted({r.subject_id for r in records if r.sensor is not Sensor.A})
    if not same:
        raise EmptyDataset("no sensor-A images to split")
    split = subject_exclusive_split(same, cfg.split.ratios, cfg.split.seed)
    path = cfg.workspace / "split.json"
    save_split(path, split, {"cross_sensor": other, "ratios": list(cfg.split.ratios),
                             "seed": cfg.split.seed})
    log.info("split %s subjects, %d held out for cross-sensor evaluation",
             "/".join(str(len(s)) for s in split.sets()), len(other))
    return path


def load_split(ws: Path) -> tuple[SplitAssignment, list[str]]:
    path = ws / "split.json"
    try:
        data = json.loads(path.read_text())
    except OSError as exc:
        raise SchemaError(f"cannot read {path}; run split first") from exc
    return SplitAssignment.from_json(data), data.get("cross_sensor", [])


def load_samples(cfg: RunConfig, subjects, modality: Modality) -> SampleSet:
    """Load cached inputs for the given subjects, skipping iris exclusions."""
    ws = cfg.workspace
    subjects = set(subjects)
    records = [r for r in read_manifest(cfg.manifest_path) if r.subject_id in subjects]
    masks = None
    if modality is Modality.IRIS:
        excluded = read_exclusions(ws)
        records = [r for r in records if r.sample_id not in excluded]
        pairs = [iris_cache_paths(ws, r.sample_id) for r in records]
        images = [load_png_u8(s) for s, _ in pairs]
        masks = np.stack([load_png_u8(m) > 127 for _, m in pairs]).astype(np.float32) if pairs else None
    else:
        images = [load_png_u8(eye_cache_path(ws, r.sample_id)) for r in records]
    images = np.stack(images) if images else np.zeros((0, 1, 1), np.uint8)
    return SampleSet(images, np.array([r.age for r in records], dtype=np.int64),
                     [r.subject_id for r in records], [r.sample_id for r in records],
                     modality, masks)


# -- train ------------------------------------------------------------------

def cmd_train(cfg: RunConfig) -> Path:
    ws = cfg.workspace
    split, _ = load_split(ws)
    modality = cfg.modality
    tr = load_samples(cfg, split.train, modality)
    va = load_samples(cfg, split.val, modality)
    policy = cfg.augment
    log.info("training %s model on %d images (%d validation)", modality.value, len(tr), len(va))
    ckpt, history = train(cfg.train, tr, va, NORM_PRESETS[modality.value], policy)
    path = cfg.checkpoint_path
    path.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(ckpt, path)
    (ws / f"history_{modality.value}.csv").write_text(history.to_csv())
    log.info("best epoch %d, checkpoint %s", history.best_epoch, path)
    return path


# -- eval -------------------------------------------------------------------

def cmd_eval(cfg: RunConfig, cross_sensor: bool = False) -> Path:
    ws = cfg.workspace
    ckpt = load_checkpoint(cfg.checkpoint_path)
    modality = Modality(ckpt.metadata.get("modality", cfg.modality.value))
    split, other_subjects = load_split(ws)
    out = ws / "reports" / modality.value
    test = load_samples(cfg, split.test, modality)
    report = evaluate(ckpt, test, f"{modality.value}_test")
    write_report(report, out, "test")
    log.info("test accuracy %.4f, MAE %.3f", report.classification.accuracy, report.regression.mae)
    if cross_sensor:
        other = load_samples(cfg, other_subjects, modality)
        if len(other) == 0:
            raise EmptyDataset("no sensor-B images; set synth.sensor_b_fraction > 0")
        pair = cross_sensor_eval(ckpt, test, other)
        write_report(pair.same, out, "same_sensor")
        write_report(pair.other, out, "other_sensor")
        (out / "cross_sensor.json").write_text(json.dumps(pair.to_json(), indent=2, sort_keys=True) + "\n")
        log.info("cross-sensor delta: %s", pair.delta)
    return out / "test.json"


# -- bench ------------------------------------------------------------------

def _time_forward(net, x, warmup: int, iterations: int) -> list[float]:
    for _ in range(warmup):
        net.forward(x)
    times = []
    for _ in range(iterations):
        t0 = time.perf_counter()
        net.forward(x)
        times.append((time.perf_counter() - t0) * 1e3)
    return times


def latency_summary(times_ms) -> dict:
    t = np.asarray(times_ms, dtype=np.float64)
    mean = float(t.mean())
    return {
        "mean_ms": mean,
        "median_ms": float(statistics.median(t)),
        "p95_ms": float(np.percentile(t, 95)),
        "cv": float(t.std() / mean) if mean > 0 else 0.0,
    }


def cmd_bench(cfg: RunConfig) -> Path:
    ckpt = load_checkpoint(cfg.checkpoint_path)
    net = ckpt.network
    rng = np.random.default_rng(cfg.train.seed)
    x = rng.standard_normal((1, *net.input_shape)).astype(np.float32)
    if net.input_shape[0] == 2:
        x[:, 1] = 1.0
    variants = {"fp32": net, "fp16": quantize_fp16(net)}
    report = {
        "model_id": cfg.checkpoint_path.stem,
        "parameter_count": net.n_params,
        "size_bytes": {"fp32": net.size_bytes("fp32"), "fp16": net.size_bytes("fp16")},
        "batch_size": 1,
        "iterations": cfg.bench.iterations,
        "warmup": cfg.bench.warmup,
        "latency": {},
    }
    for name, model in variants.items():
        times = _time_forward(model, x, cfg.bench.warmup, cfg.bench.iterations)
        report["latency"][name] = latency_summary(times)
        log.info("%s: mean %.3f ms", name, report["latency"][name]["mean_ms"])
    path = cfg.workspace / f"bench_{cfg.checkpoint_path.stem}.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return path


# -- entry point ------------------------------------------------------------

COMMANDS = {
    "synth": cmd_synth,
    "preprocess": cmd_preprocess,
    "split": cmd_split,
    "train": cmd_train,
    "eval": cmd_eval,
    "bench": cmd_bench,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ocularage", description="Pediatric ocular age estimation pipeline.")
    p.add_argument("command", choices=list(COMMANDS))
    p.add_argument("--config", help="TOML run configuration")
    p.add_argument("--checkpoint", help="checkpoint path (overrides paths.checkpoint)")
    p.add_argument("--cross-sensor", action="store_true", help="also evaluate on held-out sensor-B subjects")
    p.add_argument("--modality", choices=[m.value for m in Modality])
    p.add_argument("-q", "--quiet", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args.config)
        if args.modality:
            cfg = cfg.with_modality(Modality(args.modality))
        if args.checkpoint:
            cfg = cfg.with_checkpoint(args.checkpoint)
        if args.command == "eval":
            out = cmd_eval(cfg, cross_sensor=args.cross_sensor)
        else:
            out = COMMANDS[args.command](cfg)
    except OcularAgeError as exc:
        msg = " ".join(str(exc).split())
        print(f"error:{exc.exit_code}:{type(exc).__name__}: {msg}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        err = IoError(str(exc))
        print(f"error:{err.exit_code}:IoError: {' '.join(str(exc).split())}", file=sys.stderr)
        return err.exit_code
    print(out)
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
