"""Command line entry point: ``glimpsefas <subcommand> CONFIG [options]``.

Exit codes: 2 config/axis error, 3 non-finite loss, 4 checkpoint mismatch,
5 missing label class in evaluation data.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import checkpoint as ckpt_io
from .compute import compute_report
from .config import ConfigSchemaError, ExperimentConfig, load_config, parse_overrides, write_snapshot
from .metrics import EvaluationError, evaluate_report, write_far_frr_table, write_report, write_scores
from .model import GlimpseNet, desk_preset, paper_preset
from .synthdata import (
    ConfigError,
    Sample,
    generate_dataset,
    load_image_folder,
    read_manifest,
    split_protocol,
    write_dataset,
)
from .training import TrainingDivergence, evaluate, train_pipeline
from .viz import class_activation_map, draw_overlay, heatmap_image, trajectory, write_trajectory_csv

log = logging.getLogger("glimpsefas")

EXIT_CONFIG, EXIT_DIVERGED, EXIT_MISMATCH, EXIT_LABELS = 2, 3, 4, 5
AXES = {
    "branch": ("train.ablation", ["global_only", "local_only", "full"]),
    "selector": ("train.selector", ["max_scores", "random", "drl"]),
    "p": ("model.patch_size", [2, 4, 8, 16]),
    "T": ("model.steps", [2, 4, 8, 16]),
    "stage": ("train.scheme", ["one_stage", "two_stage"]),
    "fusion": ("model.fusion", ["average", "weighted_average", "concat"]),
}


class CLIError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


class JsonLines:
    def __init__(self, path: Path):
        path.parent.mkdir(parents=True, exist_ok=True)
        self.fh = open(path, "w", encoding="utf-8")
        self.last: dict | None = None

    def __call__(self, record: dict) -> None:
        self.last = record
        self.fh.write(json.dumps(record, sort_keys=True) + "\n")
        self.fh.flush()

    def close(self) -> None:
        self.fh.close()


# -- data ----------------------------------------------------------------------


def all_samples(cfg: ExperimentConfig) -> list[Sample]:
    size = cfg.model.input_size
    if cfg.data_source == "synth":
        if cfg.data_path:
            return read_manifest(Path(cfg.data_path), size)
        return generate_dataset(cfg.synth)
    if not cfg.data_path:
        raise ConfigSchemaError("data.path", f"required for source {cfg.data_source!r}")
    if cfg.data_source == "manifest":
        return read_manifest(Path(cfg.data_path), size)
    return load_image_folder(Path(cfg.data_path), cfg.label_map, size)


def splits(cfg: ExperimentConfig):
    return split_protocol(all_samples(cfg), cfg.split_ratios, cfg.split_seed)


def resolve_data(cfg: ExperimentConfig, spec: str | None, default: str = "test") -> list[Sample]:
    """A split name, a manifest CSV or an image folder."""
    spec = spec or default
    if spec in ("train", "dev", "test"):
        return getattr(splits(cfg), spec)
    path = Path(spec)
    if path.is_dir():
        return load_image_folder(path, cfg.label_map, cfg.model.input_size)
    if path.is_file():
        return read_manifest(path, cfg.model.input_size)
    raise CLIError(EXIT_CONFIG, f"no such split, manifest or folder: {spec}")


# -- commands --------------------------------------------------------------------


def cmd_synth(cfg: ExperimentConfig) -> Path:
    out = cfg.output_dir
    write_snapshot(cfg, out)
    samples = generate_dataset(cfg.synth)
    manifest = write_dataset(samples, out / "data")
    log.info("wrote %d samples to %s", len(samples), manifest)
    return manifest


def cmd_train(cfg: ExperimentConfig, stage: str = "all") -> dict[str, Path]:
    out = cfg.output_dir
    write_snapshot(cfg, out)
    sp = splits(cfg)
    logger = JsonLines(out / "logs" / "train.jsonl")
    try:
        stage1 = None
        if stage == "2":
            stage1 = ckpt_io.load(out / "checkpoints" / "stage1.pt")
        ckpts = train_pipeline(sp.train, cfg.model, cfg.train, logger, stage1=stage1, stop_after_stage1=stage == "1")
    except TrainingDivergence as exc:
        raise CLIError(EXIT_DIVERGED, str(exc)) from exc
    finally:
        logger.close()
    paths = {}
    for name, ck in ckpts.items():
        paths[name] = ckpt_io.save(ck, out / "checkpoints" / f"{name}.pt")
    final = ckpts.get("stage2") or ckpts.get("one_stage")
    if final is not None:
        (out / "scores").mkdir(parents=True, exist_ok=True)
        write_scores(evaluate(final.build(), sp.dev), out / "scores" / "dev.csv")
    return paths


def _load_model(cfg: ExperimentConfig, path: str | Path) -> GlimpseNet:
    try:
        ck = ckpt_io.load(path)
    except ckpt_io.LoadError as exc:
        raise CLIError(EXIT_MISMATCH, str(exc)) from exc
    if ck.stage == "stage1":
        raise CLIError(EXIT_MISMATCH, f"{path} is a stage-1 checkpoint; evaluate a stage-2 or one-stage one")
    if ck.model_config.to_dict() != cfg.model.to_dict():
        diff = sorted(k for k, v in cfg.model.to_dict().items() if ck.model_config.to_dict().get(k) != v)
        raise CLIError(EXIT_MISMATCH, f"checkpoint model config differs from config in: {', '.join(diff)}")
    try:
        return ck.build()
    except ckpt_io.LoadError as exc:
        raise CLIError(EXIT_MISMATCH, str(exc)) from exc


def cmd_eval(cfg: ExperimentConfig, checkpoint: str, data: str | None = None, dev: str | None = None) -> dict:
    model = _load_model(cfg, checkpoint)
    test = resolve_data(cfg, data)
    out = cfg.output_dir / "eval"
    write_snapshot(cfg, out)
    scores = evaluate(model, test)
    dev_scores = evaluate(model, resolve_data(cfg, dev)) if dev else None
    try:
        report = evaluate_report(scores, dev_scores, cfg.group_mode)
        write_far_frr_table(scores, out / "far_frr.csv", cfg.group_mode)
    except EvaluationError as exc:
        raise CLIError(EXIT_LABELS, str(exc)) from exc
    write_scores(scores, out / "scores.csv")
    if dev_scores is not None:
        write_scores(dev_scores, out / "dev_scores.csv")
    write_report(report, out / "report.json")
    return report


def cmd_ablate(cfg: ExperimentConfig, axis: str | None = None, values: list | None = None) -> Path:
    axis = axis or cfg.ablate_axis
    if axis not in AXES:
        raise CLIError(EXIT_CONFIG, f"unknown ablation axis {axis!r}; choose from {sorted(AXES)}")
    key, default_values = AXES[axis]
    values = values or cfg.ablate_values or default_values
    out = cfg.output_dir / f"ablate_{axis}"
    out.mkdir(parents=True, exist_ok=True)
    sp = splits(cfg)
    rows = []
    stage1_cache: dict = {}
    for value in values:
        row_cfg = _override(cfg, key, value, out / f"{axis}={value}")
        write_snapshot(row_cfg, row_cfg.output_dir)
        logger = JsonLines(row_cfg.output_dir / "train.jsonl")
        try:
            # backbone pretraining does not depend on these axes; reuse it
            reuse = axis in ("branch", "selector", "fusion", "T") and row_cfg.train.scheme == "two_stage"
            ckpts = train_pipeline(sp.train, row_cfg.model, row_cfg.train, logger, stage1=stage1_cache.get("s1") if reuse else None)
        except TrainingDivergence as exc:
            raise CLIError(EXIT_DIVERGED, str(exc)) from exc
        finally:
            logger.close()
        if reuse and "stage1" in ckpts:
            stage1_cache["s1"] = ckpts["stage1"]
        final = ckpts.get("stage2") or ckpts.get("one_stage")
        model = final.build()
        test_scores, dev_scores = evaluate(model, sp.test), evaluate(model, sp.dev)
        write_scores(test_scores, row_cfg.output_dir / "scores.csv")
        rep = evaluate_report(test_scores, dev_scores, cfg.group_mode)
        rows.append({axis: value, **{k: rep[k] for k in ("eer", "hter", "apcer", "bpcer", "acer")}})
    table = out / "table.csv"
    with open(table, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=[axis, "eer", "hter", "apcer", "bpcer", "acer"], lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in r.items()})
    return table


def _override(cfg: ExperimentConfig, key: str, value, out_dir: Path) -> ExperimentConfig:
    from .config import resolve

    raw = json.loads(json.dumps(cfg.raw))
    section, field = key.split(".")
    raw[section][field] = value
    raw["output_dir"] = str(out_dir)
    try:
        return resolve(raw)
    except ConfigSchemaError as exc:
        raise CLIError(EXIT_CONFIG, str(exc)) from exc


def _image_tensor(cfg: ExperimentConfig, image_path: str) -> tuple[np.ndarray, torch.Tensor]:
    from .synthdata import _read_png

    arr = _read_png(Path(image_path), cfg.model.input_size)
    return arr, torch.from_numpy(arr.astype(np.float32)).permute(2, 0, 1)


def cmd_viz_traj(cfg: ExperimentConfig, checkpoint: str, image: str, out: str | None = None) -> Path:
    model = _load_model(cfg, checkpoint)
    arr, x = _image_tensor(cfg, image)
    rows = trajectory(model, x)
    out_dir = Path(out) if out else cfg.output_dir / "viz"
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = Path(image).stem
    draw_overlay(arr, rows).save(out_dir / f"{stem}_trajectory.png")
    write_trajectory_csv(rows, out_dir / f"{stem}_trajectory.csv")
    return out_dir / f"{stem}_trajectory.png"


def cmd_viz_cam(cfg: ExperimentConfig, checkpoint: str, image: str, out: str | None = None) -> Path:
    model = _load_model(cfg, checkpoint)
    _, x = _image_tensor(cfg, image)
    heat = class_activation_map(model, x)
    out_dir = Path(out) if out else cfg.output_dir / "viz"
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"{Path(image).stem}_cam.png"
    heatmap_image(heat).save(path)
    np.save(out_dir / f"{Path(image).stem}_cam.npy", heat.numpy())
    return path


def cmd_report_compute(checkpoint: str | None, preset: str | None, steps: list[int] | None, fps: bool) -> dict:
    if checkpoint:
        try:
            model = ckpt_io.load(checkpoint).build()
        except ckpt_io.LoadError as exc:
            raise CLIError(EXIT_MISMATCH, str(exc)) from exc
        if not isinstance(model, GlimpseNet):
            # a stage-1 archive fixes the config; count the full network it seeds
            model = GlimpseNet(ckpt_io.load(checkpoint).model_config)
    else:
        cfg = paper_preset() if preset == "paper" else desk_preset()
        model = GlimpseNet(cfg)
    return compute_report(model, steps, fps)


# -- argument parsing --------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="glimpsefas", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def with_config(name, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("config")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config key by dotted path, e.g. train.seed=3")
        return p

    with_config("synth", "generate the synthetic dataset")
    p = with_config("train", "run stage 1 then stage 2 (or one-stage training)")
    p.add_argument("--stage", choices=["1", "2", "all"], default="all")
    p = with_config("eval", "score data with a checkpoint and report metrics")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="split name (train/dev/test), manifest CSV or image folder")
    p.add_argument("--dev", help="threshold-selection data, same forms as --data")
    p = with_config("ablate", "sweep one axis holding everything else fixed")
    p.add_argument("--axis", help=f"one of {', '.join(AXES)}")
    p.add_argument("--values", help="comma separated values")
    for name, help_ in (("viz-traj", "draw the glimpse trajectory"), ("viz-cam", "class activation heatmap")):
        p = with_config(name, help_)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--image", required=True)
        p.add_argument("--out")
    p = sub.add_parser("report-compute", help="parameter and MAC counts")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--checkpoint")
    g.add_argument("--preset", choices=["desk", "paper"], default="desk")
    p.add_argument("--steps", default="4,8")
    p.add_argument("--fps", action="store_true")
    p = sub.add_parser("benchmark", help="synthetic benchmark: fused, DRL and two-stage against their baselines")
    p.add_argument("--seeds", default="0,1,2")
    return ap


def _parse_values(text: str | None):
    if not text:
        return None
    import yaml

    return [yaml.safe_load(v) for v in text.split(",")]


def run(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    torch.set_num_threads(1)
    try:
        if args.command == "report-compute":
            steps = [int(s) for s in args.steps.split(",")]
            print(json.dumps(cmd_report_compute(args.checkpoint, args.preset, steps, args.fps), indent=2))
            return 0
        if args.command == "benchmark":
            from .benchmark import BenchmarkConfig, run_benchmark

            seeds = tuple(int(v) for v in args.seeds.split(","))
            res = run_benchmark(BenchmarkConfig(seeds=seeds), log=print)
            print(json.dumps(res["median"], indent=2))
            return 0
        cfg = load_config(args.config, parse_overrides(args.set))
        if args.command == "synth":
            print(cmd_synth(cfg))
        elif args.command == "train":
            for name, path in cmd_train(cfg, args.stage).items():
                print(f"{name}: {path}")
        elif args.command == "eval":
            print(json.dumps(cmd_eval(cfg, args.checkpoint, args.data, args.dev), indent=2, sort_keys=True))
        elif args.command == "ablate":
            print(cmd_ablate(cfg, args.axis, _parse_values(args.values)))
        elif args.command == "viz-traj":
            print(cmd_viz_traj(cfg, args.checkpoint, args.image, args.out))
        elif args.command == "viz-cam":
            print(cmd_viz_cam(cfg, args.checkpoint, args.image, args.out))
    except ConfigSchemaError as exc:
        print(f"config error at {exc.key_path}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except EvaluationError as exc:
        print(f"evaluation error: {exc}", file=sys.stderr)
        return EXIT_LABELS
    except CLIError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
