"""Experiment configuration: presets, modifiers, YAML loading and validation.

An experiment is a nested mapping with sections ``dataset``, ``detector``,
``sampler``, ``base_schedule``, ``schedule``, ``distill``, ``task``,
``budget``, ``evaluation`` plus ``seeds`` and ``output_dir``.  Presets
supply a complete mapping, a YAML file and ``--set`` flags are deep-merged
on top, and :func:`build_config` validates everything before any work.
"""
from __future__ import annotations

import copy
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import yaml

from .data import VOC_CLASSES
from .detector import DetectorConfig
from .lifelong import DistillConfig, TaskSpec, TrainSchedule, budget_for_task
from .sampling import ABLATIONS, SamplerConfig

DATA_ROOT_ENV = "LIFELONG_DET_DATA"


class ConfigError(ValueError):
    pass


@dataclass
class DatasetSection:
    kind: str = "shapes"                  # shapes | voc | coco
    root: str | None = None
    train_split: str = "trainval"
    test_split: str = "test"
    shorter_side: int | None = None
    # shapes only
    canvas: int = 128
    shape_classes: list[str] = field(default_factory=lambda: ["circle", "square", "triangle", "star"])
    train_images: int = 400
    test_images: int = 150
    train_seed: int = 1
    test_seed: int = 2
    objects_per_image: list[int] = field(default_factory=lambda: [1, 3])
    size_range: list[int] = field(default_factory=lambda: [24, 52])

    def __post_init__(self):
        if self.kind not in ("shapes", "voc", "coco"):
            raise ConfigError(f"dataset.kind must be shapes, voc or coco, got {self.kind!r}")
        if self.kind == "shapes" and self.train_seed == self.test_seed:
            raise ConfigError("dataset.train_seed and dataset.test_seed must differ")

    def resolved_root(self) -> Path | None:
        env = os.environ.get(DATA_ROOT_ENV)
        if env and self.root and not Path(self.root).is_absolute():
            return Path(env) / self.root
        if env and not self.root:
            return Path(env)
        return Path(self.root) if self.root else None


@dataclass
class BudgetSection:
    """Iterations per incremental task: ``per_class * |C_new|`` when set, else single/multi."""
    per_class: int | None = None
    single: int = 4000
    multi: int = 70000

    def iterations(self, num_new: int) -> int:
        return budget_for_task(num_new, self.per_class, self.single, self.multi)


@dataclass
class EvaluationSection:
    ap_style: str = "area"
    score_filter: float | None = 0.5
    coco_map: bool = False
    recall_budgets: list[int] = field(default_factory=lambda: [300, 2000])


@dataclass
class ExperimentConfig:
    name: str
    dataset: DatasetSection
    detector: DetectorConfig
    sampler: SamplerConfig
    base_schedule: TrainSchedule
    schedule: TrainSchedule
    distill: DistillConfig
    task: TaskSpec
    budget: BudgetSection
    evaluation: EvaluationSection
    seeds: list[int] = field(default_factory=lambda: [0])
    output_dir: str = "runs"
    modifiers: list[str] = field(default_factory=list)

    def schedule_for(self, num_new: int) -> TrainSchedule:
        """Incremental schedule with the budget law applied; a step at 75% if one is configured."""
        iters = self.budget.iterations(num_new)
        d = asdict(self.schedule)
        d["iterations"] = iters
        if d["lr_step"] is not None:
            d["lr_step"] = int(round(iters * 0.75))
        return TrainSchedule(**d)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "dataset": asdict(self.dataset),
            "detector": self.detector.to_dict(),
            "sampler": self.sampler.to_dict(),
            "base_schedule": asdict(self.base_schedule),
            "schedule": asdict(self.schedule),
            "distill": {**asdict(self.distill), "freeze": list(self.distill.freeze)},
            "task": asdict(self.task),
            "budget": asdict(self.budget),
            "evaluation": asdict(self.evaluation),
            "seeds": list(self.seeds),
            "output_dir": self.output_dir,
            "modifiers": list(self.modifiers),
        }

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))


# -- presets -------------------------------------------------------------------

def _voc_split(n_old: int, sizes: list[int]) -> dict:
    order = sorted(VOC_CLASSES)
    tasks, i = [], n_old
    for s in sizes:
        tasks.append(order[i:i + s])
        i += s
    return {"universe": order, "old_classes": order[:n_old], "tasks": tasks}


def _full_voc(n_old: int, sizes: list[int], per_class: int | None) -> dict:
    return {
        "dataset": {"kind": "voc", "root": "VOCdevkit/VOC2007", "train_split": "trainval",
                    "test_split": "test", "shorter_side": 600},
        "detector": {"backbone": "resnet50-style", "num_classes": n_old},
        "evaluation": {"ap_style": "voc07-11pt"},
        "base_schedule": {"iterations": 70000, "lr": 1e-3, "lr_step": 50000, "lr_after_step": 1e-4},
        "schedule": {"iterations": 4000, "lr": 1e-4, "lr_step": None, "lr_after_step": 1e-4},
        "budget": {"per_class": per_class, "single": 4000, "multi": 70000},
        "task": _voc_split(n_old, sizes),
    }


def _coco_classes() -> list[str]:
    # category-id order of the 80 COCO classes
    return [
        "person", "bicycle", "car", "motorcycle", "airplane", "bus", "train", "truck", "boat",
        "traffic light", "fire hydrant", "stop sign", "parking meter", "bench", "bird", "cat", "dog",
        "horse", "sheep", "cow", "elephant", "bear", "zebra", "giraffe", "backpack", "umbrella",
        "handbag", "tie", "suitcase", "frisbee", "skis", "snowboard", "sports ball", "kite",
        "baseball bat", "baseball glove", "skateboard", "surfboard", "tennis racket", "bottle",
        "wine glass", "cup", "fork", "knife", "spoon", "bowl", "banana", "apple", "sandwich", "orange",
        "broccoli", "carrot", "hot dog", "pizza", "donut", "cake", "chair", "couch", "potted plant",
        "bed", "dining table", "toilet", "tv", "laptop", "mouse", "remote", "keyboard", "cell phone",
        "microwave", "oven", "toaster", "sink", "refrigerator", "book", "clock", "vase", "scissors",
        "teddy bear", "hair drier", "toothbrush",
    ]


def _shapes(old: list[str], tasks: list[list[str]], per_class: int) -> dict:
    universe = old + [c for t in tasks for c in t]
    return {
        "dataset": {"kind": "shapes", "shape_classes": universe, "canvas": 128, "shorter_side": None,
                    "train_images": 400, "test_images": 150, "train_seed": 1, "test_seed": 2},
        "detector": {"backbone": "tiny-conv", "num_classes": len(old), "width": 32,
                     "anchor_scales": [1.5, 2.5, 3.5]},
        "evaluation": {"ap_style": "area", "recall_budgets": [300, 2000]},
        "base_schedule": {"iterations": 6000, "lr": 0.02, "lr_step": 4500, "lr_after_step": 0.002,
                          "warmup": 100},
        "schedule": {"iterations": per_class, "lr": 5e-4, "lr_step": int(per_class * 0.75),
                     "lr_after_step": 5e-5, "warmup": 50},
        "budget": {"per_class": per_class},
        "task": {"universe": universe, "old_classes": old, "tasks": tasks},
    }


def _coco_split() -> dict:
    names = _coco_classes()
    return {
        "dataset": {"kind": "coco", "root": "coco", "train_split": "train2017", "test_split": "val2017",
                    "shorter_side": 600},
        "detector": {"backbone": "resnet50-style", "num_classes": 40},
        "evaluation": {"ap_style": "area", "coco_map": True},
        "base_schedule": {"iterations": 490000, "lr": 1e-3, "lr_step": 350000, "lr_after_step": 1e-4},
        "schedule": {"iterations": 490000, "lr": 1e-4, "lr_step": None, "lr_after_step": 1e-4},
        "budget": {"per_class": None, "single": 4000, "multi": 490000},
        "task": {"universe": names, "old_classes": names[:40], "tasks": [names[40:]]},
    }


SHAPES_PER_CLASS = 1500

PRESETS = {
    "voc-19+1": lambda: _full_voc(19, [1], None),
    "voc-10+10": lambda: _full_voc(10, [10], None),
    "voc-10+5+5": lambda: _full_voc(10, [5, 5], 4000),
    "voc-10+2": lambda: _full_voc(10, [2] * 5, 4000),
    "voc-10+1": lambda: _full_voc(10, [1] * 10, 4000),
    "coco-40+40": _coco_split,
    "shapes-3+1": lambda: _shapes(["circle", "square", "triangle"], [["star"]], SHAPES_PER_CLASS),
    "shapes-2+1+1": lambda: _shapes(["circle", "square"], [["triangle"], ["star"]], SHAPES_PER_CLASS),
}

MODIFIERS = {
    **{name: {"sampler": dict(v)} for name, v in ABLATIONS.items()},
    "fine-tune": {"distill": {"lambda2": 0.0, "lambda3": 0.0}, "sampler": dict(ABLATIONS["no-ppas"])},
    "fix-rpn": {"distill": {"lambda2": 0.0, "lambda3": 0.0, "freeze": ["rpn"]},
                "sampler": dict(ABLATIONS["no-ppas"])},
    "fix-rpn-conv": {"distill": {"lambda2": 0.0, "lambda3": 0.0, "freeze": ["backbone", "rpn"]},
                     "sampler": dict(ABLATIONS["no-ppas"])},
}


def resolve_preset(name: str) -> dict:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; valid: {', '.join(sorted(PRESETS))}")
    return {"name": name, **copy.deepcopy(PRESETS[name]())}


def apply_modifier(raw: dict, name: str) -> dict:
    if name not in MODIFIERS:
        raise ConfigError(f"unknown modifier {name!r}; valid: {', '.join(sorted(MODIFIERS))}")
    out = deep_merge(raw, MODIFIERS[name])
    out["modifiers"] = list(raw.get("modifiers", [])) + [name]
    return out


def deep_merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def parse_override(text: str) -> dict:
    """``section.key=value`` -> nested dict; value parsed as YAML."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, value = text.split("=", 1)
    parts = key.strip().split(".")
    if not all(parts):
        raise ConfigError(f"bad override key {key!r}")
    node: dict[str, Any] = {}
    cur = node
    for p in parts[:-1]:
        cur[p] = {}
        cur = cur[p]
    parsed = yaml.safe_load(value)
    if isinstance(parsed, str):
        # YAML 1.1 reads "1e-4" as a string
        try:
            parsed = float(parsed)
        except ValueError:
            pass
    cur[parts[-1]] = parsed
    return node


def load_yaml(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as e:
        raise ConfigError(f"{path}: invalid YAML ({e})") from e
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return data


def _section(cls, raw: dict | None, name: str, tuples: tuple[str, ...] = ()):
    raw = dict(raw or {})
    known = {f.name for f in fields(cls)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown key(s) in {name}: {', '.join(sorted(unknown))}")
    for t in tuples:
        if t in raw and raw[t] is not None:
            raw[t] = tuple(raw[t])
    try:
        return cls(**raw)
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid {name}: {e}") from e


TOP_LEVEL = {"name", "dataset", "detector", "sampler", "base_schedule", "schedule", "distill", "task",
             "budget", "evaluation", "seeds", "output_dir", "modifiers"}


def build_config(raw: dict) -> ExperimentConfig:
    """Validate a merged mapping in full and build the typed config."""
    unknown = set(raw) - TOP_LEVEL
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(sorted(unknown))}")
    for required in ("task", "detector"):
        if required not in raw:
            raise ConfigError(f"missing section {required!r}")
    task = _section(TaskSpec, raw["task"], "task")
    det_raw = dict(raw["detector"])
    det_raw.setdefault("num_classes", len(task.old_classes))
    detector = _section(DetectorConfig, det_raw, "detector", ("anchor_scales", "anchor_ratios", "rcnn_box_weights"))
    if detector.num_classes != len(task.old_classes):
        raise ConfigError(f"detector.num_classes={detector.num_classes} but task has "
                          f"{len(task.old_classes)} old classes")
    dataset = _section(DatasetSection, raw.get("dataset"), "dataset")
    if dataset.kind == "shapes" and set(task.universe) - set(dataset.shape_classes):
        raise ConfigError("task classes missing from dataset.shape_classes")
    evaluation = _section(EvaluationSection, raw.get("evaluation"), "evaluation")
    if evaluation.ap_style not in ("area", "voc07-11pt"):
        raise ConfigError(f"evaluation.ap_style must be area or voc07-11pt, got {evaluation.ap_style!r}")
    seeds = raw.get("seeds", [0])
    if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) for s in seeds):
        raise ConfigError("seeds must be a nonempty list of integers")
    return ExperimentConfig(
        name=str(raw.get("name", "experiment")),
        dataset=dataset,
        detector=detector,
        sampler=_section(SamplerConfig, raw.get("sampler"), "sampler"),
        base_schedule=_section(TrainSchedule, raw.get("base_schedule"), "base_schedule"),
        schedule=_section(TrainSchedule, raw.get("schedule"), "schedule"),
        distill=_section(DistillConfig, raw.get("distill"), "distill", ("freeze",)),
        task=task,
        budget=_section(BudgetSection, raw.get("budget"), "budget"),
        evaluation=evaluation,
        seeds=seeds,
        output_dir=str(raw.get("output_dir", "runs")),
        modifiers=list(raw.get("modifiers", [])),
    )


def resolve(preset: str | None = None, config_file=None, modifiers=(), overrides=()) -> ExperimentConfig:
    """Preset, then config file, then modifiers, then ``key=value`` overrides."""
    raw: dict = resolve_preset(preset) if preset else {}
    if config_file:
        raw = deep_merge(raw, load_yaml(config_file))
    for m in modifiers:
        raw = apply_modifier(raw, m)
    for o in overrides:
        raw = deep_merge(raw, parse_override(o))
    if not raw:
        raise ConfigError("no preset or config file given")
    return build_config(raw)
