"""Command-line entry point: ``lifelong-det <command> ...``.

Exit status: 0 success, 2 configuration error, 3 missing input, 4 numerical
abort.  Failures print a single ``error[<code>]: <message>`` line on stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from contextlib import contextmanager
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .config import DATA_ROOT_ENV, MODIFIERS, PRESETS, ConfigError, ExperimentConfig, resolve
from .data import (DatasetError, ShapesConfig, TaskView, generate_shapes, load_coco, load_shapes, load_voc,
                   resize_shorter)
from .detector import CheckpointError, load_checkpoint, save_checkpoint
from .evaluation import MetricsReport, benchmark_inference, evaluate_detector, forgetting, grouped_recall, \
    proposals_for, truth_from_sample
from .lifelong import run_task_sequence, train_base
from .losses import NonFiniteLoss
from .plotting import plot_map_vs_classes, plot_recall

log = logging.getLogger("lifelong_det")

EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERIC = 2, 3, 4


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


# -- helpers -------------------------------------------------------------------

@contextmanager
def output_lock(out_dir: Path):
    """Exclusive ownership of ``out_dir`` for the duration of a command."""
    out_dir.mkdir(parents=True, exist_ok=True)
    lock = out_dir / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise CliError(EXIT_CONFIG, f"output directory {out_dir} is locked by another run ({lock})")
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def load_config(args) -> ExperimentConfig:
    overrides = list(getattr(args, "set", None) or [])
    if getattr(args, "out", None):
        overrides.append(f"output_dir={args.out}")
    return resolve(getattr(args, "preset", None), getattr(args, "config", None),
                   getattr(args, "ablate", None) or [], overrides)


def load_datasets(cfg: ExperimentConfig):
    ds = cfg.dataset
    root = ds.resolved_root()
    if ds.kind == "shapes":
        if root is not None:
            return load_shapes(root / "train"), load_shapes(root / "test")
        common = dict(canvas=ds.canvas, classes=tuple(ds.shape_classes),
                      objects_per_image=tuple(ds.objects_per_image), size_range=tuple(ds.size_range))
        train = generate_shapes(ShapesConfig(num_images=ds.train_images, seed=ds.train_seed, **common))
        test = generate_shapes(ShapesConfig(num_images=ds.test_images, seed=ds.test_seed, **common))
        return train, test
    if root is None:
        raise CliError(EXIT_MISSING, f"dataset.root is not set (or export {DATA_ROOT_ENV})")
    if ds.kind == "voc":
        return (load_voc(root, ds.train_split, ds.shorter_side, cfg.task.universe),
                load_voc(root, ds.test_split, ds.shorter_side, cfg.task.universe))
    return load_coco(root, ds.train_split, ds.shorter_side), load_coco(root, ds.test_split, ds.shorter_side)


def run_dirs(cfg: ExperimentConfig) -> list[tuple[int, Path]]:
    base = Path(cfg.output_dir)
    if len(cfg.seeds) == 1:
        return [(cfg.seeds[0], base)]
    return [(s, base / f"seed-{s}") for s in cfg.seeds]


def make_evaluator(cfg: ExperimentConfig, test, score_filter=None):
    ev = cfg.evaluation
    sf = ev.score_filter if score_filter is None else score_filter

    def evaluate(det, seen, old, new):
        return evaluate_detector(det, test, list(seen), list(old), list(new), score_filter=sf,
                                 style=ev.ap_style, coco=ev.coco_map, recall_budgets=ev.recall_budgets)
    return evaluate


def progress_printer(every: int):
    t0 = time.perf_counter()

    def progress(step, row):
        if every and step % every == 0:
            log.info("step %d lr %.2g total %.4f (%.0fs)", step, row["lr"], row["total"], time.perf_counter() - t0)
    return progress


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2))


# -- commands ------------------------------------------------------------------

def cmd_generate_shapes(args) -> int:
    cfg = load_config(args)
    if cfg.dataset.kind != "shapes":
        raise CliError(EXIT_CONFIG, "generate-shapes needs a shapes dataset config")
    cfg.dataset.root = None
    train, test = load_datasets(cfg)
    out = Path(args.out)
    with output_lock(out):
        train.save(out / "train")
        test.save(out / "test")
    print(json.dumps({"train": str(out / "train"), "test": str(out / "test"),
                      "train_digest": train.digest(), "test_digest": test.digest()}))
    return 0


def cmd_train_base(args) -> int:
    cfg = load_config(args)
    train, test = load_datasets(cfg)
    old = cfg.task.old_classes
    for seed, out in run_dirs(cfg):
        with output_lock(out):
            cfg.save(out / "config.yaml")
            det = train_base(TaskView(train, old), old, cfg.detector, cfg.base_schedule, cfg.sampler, seed=seed,
                             log_path=out / "loss_log.csv", progress=progress_printer(args.log_every))
            save_checkpoint(out / "checkpoint.pt", det, old, {"seed": seed, "stage": 0})
            report = make_evaluator(cfg, test)(det, old, old, [])
            report.save(out / "metrics.json")
            print(json.dumps({"checkpoint": str(out / "checkpoint.pt"), "map_old": report.map_old}))
    return 0


def cmd_train_incremental(args) -> int:
    cfg = load_config(args)
    train, test = load_datasets(cfg)
    for seed, out in run_dirs(cfg):
        with output_lock(out):
            cfg.save(out / "config.yaml")
            if args.base:
                det, classes, _ = load_checkpoint(args.base)
            else:
                old = cfg.task.old_classes
                det = train_base(TaskView(train, old), old, cfg.detector, cfg.base_schedule, cfg.sampler,
                                 seed=seed, log_path=out / "stage-0" / "loss_log.csv",
                                 progress=progress_printer(args.log_every))
                classes = list(old)
            stages = run_task_sequence(cfg.task, (det, classes), train, test, cfg.schedule_for, cfg.sampler,
                                       cfg.distill, out, seed=seed, evaluate=make_evaluator(cfg, test),
                                       cache=not args.no_cache, progress=progress_printer(args.log_every))
            summary = []
            for st in stages:
                rep = MetricsReport.load(out / f"stage-{st['stage']}" / "metrics.json")
                summary.append({"stage": st["stage"], "classes": len(st["classes"]), "map_old": rep.map_old,
                                "map_new": rep.map_new, "map_all": rep.map_all})
            base_rep = MetricsReport.load(out / "stage-0" / "metrics.json")
            final_path = out / f"stage-{stages[-1]['stage']}" / "metrics.json"
            final = MetricsReport.load(final_path)
            final.forgetting = forgetting(base_rep, final)
            final.save(final_path)
            print(json.dumps({"out": str(out), "stages": summary}))
    return 0


def cmd_evaluate(args) -> int:
    det, classes, _ = load_checkpoint(args.checkpoint)
    cfg = load_config(args)
    _, test = load_datasets(cfg)
    new = [c for c in classes if c not in cfg.task.old_classes]
    old = [c for c in classes if c in cfg.task.old_classes]
    sf = 0.0 if args.no_score_filter else cfg.evaluation.score_filter
    report = make_evaluator(cfg, test, sf)(det, classes, old, new)
    out = Path(args.out or Path(args.checkpoint).parent) / "metrics.json"
    report.save(out)
    print(json.dumps({"metrics": str(out), "map_old": report.map_old, "map_new": report.map_new,
                      "map_all": report.map_all}))
    return 0


def cmd_recall(args) -> int:
    det, classes, _ = load_checkpoint(args.checkpoint)
    cfg = load_config(args)
    _, test = load_datasets(cfg)
    idx = {c: i for i, c in enumerate(classes)}
    groups = {"old": [idx[c] for c in classes if c in cfg.task.old_classes],
              "new": [idx[c] for c in classes if c not in cfg.task.old_classes],
              "all": list(range(len(classes)))}
    budgets = args.budget or cfg.evaluation.recall_budgets
    truths = [truth_from_sample(test[i], classes) for i in range(len(test))]
    props = [proposals_for(det, test[i].image, max(budgets)) for i in range(len(test))]
    grid = [round(float(t), 2) for t in np.arange(0.5, 0.951, 0.05)]
    curves = {}
    for b in budgets:
        curves[str(b)] = {g: (asdict(c) if c else None) for g, c in grouped_recall(props, truths, groups, grid, b).items()}
    out = Path(args.out or Path(args.checkpoint).parent)
    _write_json(out / "recall.json", curves)
    old = [c for c in classes if c in cfg.task.old_classes]
    report = MetricsReport(list(classes), {}, old, [c for c in classes if c not in old], None, None, None,
                           cfg.evaluation.ap_style, recall_curves=curves)
    files = []
    for b in budgets:
        paths, _ = plot_recall({Path(args.checkpoint).parent.name or "model": report}, b, out / f"recall_{b}")
        files += [str(p) for p in paths]
    print(json.dumps({"recall": str(out / "recall.json"), "figures": files}))
    return 0


def cmd_benchmark(args) -> int:
    det, _, _ = load_checkpoint(args.checkpoint)
    cfg = load_config(args)
    _, test = load_datasets(cfg)
    images = []
    for i in range(min(args.images, len(test))):
        img = test[i].image
        if args.size:
            img, _ = resize_shorter(img, args.size)
        images.append(img)
    torch.set_num_threads(args.threads)
    results = [benchmark_inference(det, images, b, warmup=1, repeats=args.repeats) for b in args.budgets]
    out = Path(args.out or Path(args.checkpoint).parent)
    _write_json(out / "timing.json", results)
    print(json.dumps(results))
    return 0


def _reports(paths) -> dict[str, MetricsReport]:
    out = {}
    for p in paths:
        p = Path(p)
        if not p.exists():
            raise FileNotFoundError(f"metrics file not found: {p}")
        out[p.parent.name if p.name == "metrics.json" else p.stem] = MetricsReport.load(p)
    return out


def _stage_reports(run_dir: Path) -> list[MetricsReport]:
    stages = sorted(run_dir.glob("stage-*/metrics.json"), key=lambda p: int(p.parent.name.split("-")[1]))
    if not stages:
        raise FileNotFoundError(f"no stage-*/metrics.json under {run_dir}")
    return [MetricsReport.load(p) for p in stages]


def cmd_plot(args) -> int:
    out = Path(args.out)
    files = []
    if args.map:
        labels = args.labels or ["run"]
        paths, _ = plot_map_vs_classes({labels[0]: list(_reports(args.map).values())}, out / "map_vs_classes")
        files += paths
    if args.recall:
        reports = _reports(args.recall)
        if args.labels and len(args.labels) == len(reports):
            reports = dict(zip(args.labels, reports.values()))
        for b in args.budget or [300]:
            paths, _ = plot_recall(reports, b, out / f"recall_{b}")
            files += paths
    if not files:
        raise CliError(EXIT_CONFIG, "plot needs --map and/or --recall metrics files")
    print(json.dumps({"figures": [str(f) for f in files]}))
    return 0


def cmd_report(args) -> int:
    """Figures and a summary table for one or more run directories."""
    runs = {}
    for d in args.runs:
        d = Path(d)
        if not d.is_dir():
            raise FileNotFoundError(f"run directory not found: {d}")
        runs[d.name] = _stage_reports(d)
    out = Path(args.out)
    files, _ = plot_map_vs_classes(runs, out / "map_vs_classes")
    finals = {name: stages[-1] for name, stages in runs.items()}
    budgets = sorted({int(b) for r in finals.values() for b in r.recall_curves})
    for b in budgets:
        paths, _ = plot_recall(finals, b, out / f"recall_{b}")
        files += paths
    table = {name: [{"classes": len(r.class_names), "map_old": r.map_old, "map_new": r.map_new,
                     "map_all": r.map_all} for r in stages] for name, stages in runs.items()}
    _write_json(out / "summary.json", table)
    lines = ["| run | stage | classes | mAP old | mAP new | mAP all |", "|---|---|---|---|---|---|"]
    fmt = lambda v: "-" if v is None else f"{100 * v:.1f}"
    for name, rows in table.items():
        for k, r in enumerate(rows):
            lines.append(f"| {name} | {k} | {r['classes']} | {fmt(r['map_old'])} | {fmt(r['map_new'])} | {fmt(r['map_all'])} |")
    (out / "summary.md").write_text("\n".join(lines) + "\n")
    print(json.dumps({"figures": [str(f) for f in files], "summary": str(out / "summary.md")}))
    return 0


# -- parser --------------------------------------------------------------------

def _config_args(p, out_help="output directory"):
    p.add_argument("--preset", help=f"one of: {', '.join(PRESETS)}")
    p.add_argument("--config", help="YAML config file merged over the preset")
    p.add_argument("--ablate", action="append", metavar="MOD",
                   help=f"modifier, repeatable: {', '.join(MODIFIERS)}")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override, e.g. schedule.lr=0.01")
    p.add_argument("--out", help=out_help)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="lifelong-det", description="Class-incremental two-stage detection.")
    ap.add_argument("--version", action="version", version=__version__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-shapes", help="write the synthetic train/test sets to disk")
    _config_args(p)
    p.set_defaults(func=cmd_generate_shapes)

    for name, func, helptext in (("train-base", cmd_train_base, "train the base detector on the old classes"),
                                 ("train-incremental", cmd_train_incremental, "run the incremental task sequence")):
        p = sub.add_parser(name, help=helptext)
        _config_args(p)
        p.add_argument("--log-every", type=int, default=0, help="log progress every N steps (needs -v)")
        if name == "train-incremental":
            p.add_argument("--base", help="base checkpoint (trained first when omitted)")
            p.add_argument("--no-cache", action="store_true", help="recompute teacher outputs every step")
        p.set_defaults(func=func)

    p = sub.add_parser("evaluate", help="mAP of a checkpoint")
    p.add_argument("checkpoint")
    _config_args(p)
    p.add_argument("--no-score-filter", action="store_true", help="keep detections below 0.5")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("recall", help="proposal recall curves")
    p.add_argument("checkpoint")
    _config_args(p)
    p.add_argument("--budget", type=int, action="append")
    p.set_defaults(func=cmd_recall)

    p = sub.add_parser("benchmark", help="per-stage inference timing")
    p.add_argument("checkpoint")
    _config_args(p)
    p.add_argument("--budgets", type=int, nargs="+", default=[300, 2000])
    p.add_argument("--images", type=int, default=5)
    p.add_argument("--size", type=int, default=None, help="resize shorter side before timing")
    p.add_argument("--repeats", type=int, default=1)
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_benchmark)

    p = sub.add_parser("plot", help="figures from metrics files")
    p.add_argument("--map", nargs="+", help="stage-ordered metrics files for an mAP-vs-classes curve")
    p.add_argument("--recall", nargs="+", help="metrics files with recall curves")
    p.add_argument("--labels", nargs="+")
    p.add_argument("--budget", type=int, action="append")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("report", help="figures and summary table for run directories")
    p.add_argument("runs", nargs="+")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except CliError as e:
        code, msg = e.code, str(e)
    except ConfigError as e:
        code, msg = EXIT_CONFIG, str(e)
    except (FileNotFoundError, DatasetError, CheckpointError) as e:
        code, msg = EXIT_MISSING, str(e)
    except (NonFiniteLoss, FloatingPointError) as e:
        code, msg = EXIT_NUMERIC, str(e)
    msg = " ".join(msg.split())
    print(f"error[{code}]: {msg}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
