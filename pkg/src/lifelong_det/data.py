"""Datasets: VOC / COCO readers, the synthetic shapes generator and task views.

A sample's image is an ``(H, W, 3)`` uint8 array; boxes are ``(n, 4)``
float corner boxes in continuous pixel coordinates.
"""
from __future__ import annotations

import hashlib
import json
import math
import xml.etree.ElementTree as ET
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image, ImageDraw

VOC_CLASSES = (
    "aeroplane", "bicycle", "bird", "boat", "bottle", "bus", "car", "cat", "chair", "cow",
    "diningtable", "dog", "horse", "motorbike", "person", "pottedplant", "sheep", "sofa",
    "train", "tvmonitor",
)
SHAPE_CLASSES = ("circle", "square", "triangle", "star", "cross", "hexagon")
SHAPES_FORMAT = "shapes-v1"


class DatasetError(RuntimeError):
    pass


@dataclass
class Sample:
    image_id: str
    image: np.ndarray
    boxes: np.ndarray
    classes: list[str]
    difficult: np.ndarray = None

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        if self.difficult is None:
            self.difficult = np.zeros(len(self.boxes), dtype=bool)

    @property
    def size(self) -> tuple[int, int]:
        return self.image.shape[0], self.image.shape[1]


@dataclass
class Annotation:
    """Image-level metadata available without decoding pixels."""
    image_id: str
    width: int
    height: int
    boxes: np.ndarray
    classes: list[str]
    difficult: np.ndarray


class DetectionDataset:
    """Read-only indexed dataset.  Subclasses provide ``_load_image``."""

    def __init__(self, class_names: Sequence[str], annotations: list[Annotation], shorter_side: int | None = None):
        self.class_names = list(class_names)
        self.annotations = annotations
        self.shorter_side = shorter_side

    def __len__(self) -> int:
        return len(self.annotations)

    def __getitem__(self, i: int) -> Sample:
        ann = self.annotations[i]
        img = self._load_image(i)
        boxes = ann.boxes.copy()
        if self.shorter_side:
            img, scale = resize_shorter(img, self.shorter_side)
            boxes *= scale
        return Sample(ann.image_id, img, boxes, list(ann.classes), ann.difficult.copy())

    def _load_image(self, i: int) -> np.ndarray:
        raise NotImplementedError


class InMemoryDataset(DetectionDataset):
    def __init__(self, class_names, annotations, images: list[np.ndarray]):
        super().__init__(class_names, annotations)
        self.images = images

    def _load_image(self, i):
        return self.images[i]


class FileDataset(DetectionDataset):
    def __init__(self, class_names, annotations, paths: list[Path], shorter_side=None):
        super().__init__(class_names, annotations, shorter_side)
        self.paths = paths

    def _load_image(self, i):
        with Image.open(self.paths[i]) as im:
            return np.asarray(im.convert("RGB"))


def resize_shorter(img: np.ndarray, shorter: int) -> tuple[np.ndarray, float]:
    h, w = img.shape[:2]
    scale = shorter / min(h, w)
    if abs(scale - 1) < 1e-9:
        return img, 1.0
    size = (max(1, round(w * scale)), max(1, round(h * scale)))
    return np.asarray(Image.fromarray(img).resize(size, Image.BILINEAR)), scale


def hflip(sample: Sample) -> Sample:
    w = sample.image.shape[1]
    boxes = sample.boxes.copy()
    boxes[:, [0, 2]] = w - sample.boxes[:, [2, 0]]
    return replace(sample, image=np.ascontiguousarray(sample.image[:, ::-1]), boxes=boxes)


# -- VOC -------------------------------------------------------------------

def parse_voc_xml(path, class_names: Sequence[str] = VOC_CLASSES) -> Annotation:
    path = Path(path)
    try:
        root = ET.parse(path).getroot()
        size = root.find("size")
        width = int(size.find("width").text)
        height = int(size.find("height").text)
        boxes, classes, difficult = [], [], []
        for obj in root.iter("object"):
            name = obj.find("name").text.strip()
            if name not in class_names:
                raise DatasetError(f"{path}: unknown class name {name!r}")
            bb = obj.find("bndbox")
            x1, y1, x2, y2 = (float(bb.find(k).text) for k in ("xmin", "ymin", "xmax", "ymax"))
            # VOC stores 1-based inclusive pixel indices
            boxes.append([x1 - 1, y1 - 1, x2, y2])
            classes.append(name)
            d = obj.find("difficult")
            difficult.append(d is not None and d.text.strip() == "1")
    except DatasetError:
        raise
    except (ET.ParseError, AttributeError, TypeError, ValueError) as e:
        raise DatasetError(f"{path}: malformed annotation ({e})") from e
    stem = root.findtext("filename", default=path.stem)
    return Annotation(Path(stem).stem, width, height, np.asarray(boxes, dtype=np.float64).reshape(-1, 4),
                      classes, np.asarray(difficult, dtype=bool))


def voc_xml(ann: Annotation) -> str:
    root = ET.Element("annotation")
    ET.SubElement(root, "filename").text = f"{ann.image_id}.jpg"
    size = ET.SubElement(root, "size")
    ET.SubElement(size, "width").text = str(ann.width)
    ET.SubElement(size, "height").text = str(ann.height)
    ET.SubElement(size, "depth").text = "3"
    for box, name, diff in zip(ann.boxes, ann.classes, ann.difficult):
        obj = ET.SubElement(root, "object")
        ET.SubElement(obj, "name").text = name
        ET.SubElement(obj, "difficult").text = "1" if diff else "0"
        bb = ET.SubElement(obj, "bndbox")
        for k, v in zip(("xmin", "ymin", "xmax", "ymax"), (box[0] + 1, box[1] + 1, box[2], box[3])):
            ET.SubElement(bb, k).text = f"{v:g}"
    return ET.tostring(root, encoding="unicode")


def load_voc(root, split: str = "trainval", shorter_side: int | None = None,
             class_names: Sequence[str] = VOC_CLASSES) -> FileDataset:
    root = Path(root)
    ids_file = root / "ImageSets" / "Main" / f"{split}.txt"
    if not ids_file.exists():
        raise FileNotFoundError(f"missing VOC split file {ids_file}")
    ids = [line.strip() for line in ids_file.read_text().splitlines() if line.strip()]
    anns, paths = [], []
    for image_id in ids:
        xml = root / "Annotations" / f"{image_id}.xml"
        if not xml.exists():
            raise DatasetError(f"{xml}: annotation file missing")
        ann = parse_voc_xml(xml, class_names)
        ann.image_id = image_id
        anns.append(ann)
        paths.append(root / "JPEGImages" / f"{image_id}.jpg")
    return FileDataset(sorted(class_names), anns, paths, shorter_side)


# -- COCO ------------------------------------------------------------------

def load_coco(root, split: str = "train2017", shorter_side: int | None = None) -> FileDataset:
    """COCO instances file; classes ordered by category id, crowd boxes dropped."""
    root = Path(root)
    ann_file = root / "annotations" / f"instances_{split}.json"
    if not ann_file.exists():
        raise FileNotFoundError(f"missing COCO annotation file {ann_file}")
    try:
        data = json.loads(ann_file.read_text())
        cats = sorted(data["categories"], key=lambda c: c["id"])
        names = {c["id"]: c["name"] for c in cats}
        per_image: dict[int, list] = {}
        for a in data["annotations"]:
            if a.get("iscrowd", 0):
                continue
            if a["category_id"] not in names:
                raise DatasetError(f"{ann_file}: unknown category id {a['category_id']}")
            per_image.setdefault(a["image_id"], []).append(a)
        anns, paths = [], []
        for img in sorted(data["images"], key=lambda im: im["id"]):
            objs = per_image.get(img["id"], [])
            boxes = [[o["bbox"][0], o["bbox"][1], o["bbox"][0] + o["bbox"][2], o["bbox"][1] + o["bbox"][3]]
                     for o in objs]
            anns.append(Annotation(str(img["id"]), img["width"], img["height"],
                                   np.asarray(boxes, dtype=np.float64).reshape(-1, 4),
                                   [names[o["category_id"]] for o in objs], np.zeros(len(objs), dtype=bool)))
            paths.append(root / split / img["file_name"])
    except (KeyError, TypeError, json.JSONDecodeError) as e:
        raise DatasetError(f"{ann_file}: malformed annotation ({e})") from e
    return FileDataset([names[c["id"]] for c in cats], anns, paths, shorter_side)


# -- task views ----------------------------------------------------------------

class TaskView:
    """Dataset restricted to a visible class set.

    Images without a visible-class object are skipped; annotations of hidden
    classes are dropped outright (not kept as ignore regions).
    """

    def __init__(self, dataset: DetectionDataset, visible_classes: Sequence[str]):
        if not visible_classes:
            raise DatasetError("visible class set is empty")
        unknown = set(visible_classes) - set(dataset.class_names)
        if unknown:
            raise DatasetError(f"unknown classes {sorted(unknown)}")
        self.dataset = dataset
        self.visible = list(visible_classes)
        vis = set(self.visible)
        self.index = [i for i, a in enumerate(dataset.annotations) if any(c in vis for c in a.classes)]
        if not self.index:
            raise DatasetError(f"no images contain any of {self.visible}")

    def __len__(self) -> int:
        return len(self.index)

    def __getitem__(self, i: int) -> Sample:
        s = self.dataset[self.index[i]]
        keep = np.asarray([c in self.visible for c in s.classes], dtype=bool)
        return Sample(s.image_id, s.image, s.boxes[keep], [c for c, k in zip(s.classes, keep) if k],
                      s.difficult[keep])

    @property
    def class_names(self) -> list[str]:
        return self.visible


def task_view(dataset: DetectionDataset, visible_classes: Sequence[str]) -> TaskView:
    return TaskView(dataset, visible_classes)


# -- synthetic shapes ----------------------------------------------------------

@dataclass
class ShapesConfig:
    canvas: int = 128
    classes: tuple[str, ...] = ("circle", "square", "triangle", "star")
    class_weights: tuple[float, ...] | None = None
    objects_per_image: tuple[int, int] = (1, 3)
    size_range: tuple[int, int] = (24, 52)
    max_occlusion: float = 0.25
    noise: float = 8.0
    num_images: int = 500
    seed: int = 0

    def __post_init__(self):
        self.classes = tuple(self.classes)
        self.objects_per_image = tuple(self.objects_per_image)
        self.size_range = tuple(self.size_range)
        if self.class_weights is not None:
            self.class_weights = tuple(float(w) for w in self.class_weights)
            if len(self.class_weights) != len(self.classes):
                raise ValueError("class_weights must match classes")
        if len(self.classes) < 2:
            raise ValueError("shapes dataset needs at least 2 classes")
        unknown = set(self.classes) - set(SHAPE_CLASSES)
        if unknown:
            raise ValueError(f"unknown shape classes {sorted(unknown)}; known: {SHAPE_CLASSES}")

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))


def _polygon(kind: str, x1, y1, s) -> list[tuple[float, float]] | None:
    cx, cy, r = x1 + s / 2, y1 + s / 2, s / 2
    if kind == "triangle":
        return [(cx, y1), (x1 + s, y1 + s), (x1, y1 + s)]
    if kind == "hexagon":
        return [(cx + r * math.cos(math.pi / 3 * k), cy + r * math.sin(math.pi / 3 * k)) for k in range(6)]
    if kind == "star":
        pts = []
        for k in range(10):
            rad = r if k % 2 == 0 else r * 0.45
            a = -math.pi / 2 + k * math.pi / 5
            pts.append((cx + rad * math.cos(a), cy + rad * math.sin(a)))
        return pts
    if kind == "cross":
        t = s / 3
        return [(x1 + t, y1), (x1 + 2 * t, y1), (x1 + 2 * t, y1 + t), (x1 + s, y1 + t), (x1 + s, y1 + 2 * t),
                (x1 + 2 * t, y1 + 2 * t), (x1 + 2 * t, y1 + s), (x1 + t, y1 + s), (x1 + t, y1 + 2 * t),
                (x1, y1 + 2 * t), (x1, y1 + t), (x1 + t, y1 + t)]
    return None


def _draw_shape(draw: ImageDraw.ImageDraw, kind: str, x1: int, y1: int, s: int, color) -> list[float]:
    """Draw and return the tight continuous box of the rendered shape."""
    if kind == "circle":
        draw.ellipse([x1, y1, x1 + s - 1, y1 + s - 1], fill=color)
        return [x1, y1, x1 + s, y1 + s]
    if kind == "square":
        draw.rectangle([x1, y1, x1 + s - 1, y1 + s - 1], fill=color)
        return [x1, y1, x1 + s, y1 + s]
    pts = _polygon(kind, x1, y1, s - 1)
    draw.polygon(pts, fill=color)
    xs, ys = [p[0] for p in pts], [p[1] for p in pts]
    return [math.floor(min(xs)), math.floor(min(ys)), math.floor(max(xs)) + 1, math.floor(max(ys)) + 1]


def _render(cfg: ShapesConfig, rng: np.random.Generator):
    c = cfg.canvas
    lo, hi = cfg.size_range
    if lo > c or hi < lo:
        raise DatasetError(f"canvas {c} too small for object sizes {cfg.size_range}")
    n = int(rng.integers(cfg.objects_per_image[0], cfg.objects_per_image[1] + 1))
    p = None if cfg.class_weights is None else np.asarray(cfg.class_weights) / sum(cfg.class_weights)
    base = rng.integers(0, 90, size=3)
    ramp = np.linspace(0, 1, c)[None, :, None] * rng.integers(-30, 30, size=3)
    bg = np.clip(base + ramp + rng.normal(0, cfg.noise, (c, c, 3)), 0, 255).astype(np.uint8)
    img = Image.fromarray(bg)
    draw = ImageDraw.Draw(img)
    placed, objects = [], []
    for _ in range(n):
        kind = cfg.classes[int(rng.choice(len(cfg.classes), p=p))]
        for _attempt in range(200):
            s = int(rng.integers(lo, min(hi, c) + 1))
            x1 = int(rng.integers(0, c - s + 1))
            y1 = int(rng.integers(0, c - s + 1))
            cand = np.array([x1, y1, x1 + s, y1 + s], dtype=float)
            if all(_occlusion(cand, q) <= cfg.max_occlusion for q in placed):
                break
        else:
            raise DatasetError(f"canvas {c} too small to place {n} objects")
        color = tuple(int(v) for v in rng.integers(120, 256, size=3))
        box = _draw_shape(draw, kind, x1, y1, s, color)
        placed.append(cand)
        objects.append({"class": kind, "bbox": [float(v) for v in box], "color": list(color)})
    return np.asarray(img), objects


def _occlusion(a, b) -> float:
    """Intersection over the smaller box's area."""
    w = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    h = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    small = min((a[2] - a[0]) * (a[3] - a[1]), (b[2] - b[0]) * (b[3] - b[1]))
    return w * h / small


class ShapesDataset(InMemoryDataset):
    def __init__(self, cfg: ShapesConfig, images, records):
        anns = [Annotation(r["id"], cfg.canvas, cfg.canvas,
                           np.asarray([o["bbox"] for o in r["objects"]], dtype=np.float64).reshape(-1, 4),
                           [o["class"] for o in r["objects"]], np.zeros(len(r["objects"]), dtype=bool))
                for r in records]
        super().__init__(cfg.classes, anns, images)
        self.config = cfg
        self.records = records

    def digest(self) -> str:
        h = hashlib.sha256(json.dumps(self.records, sort_keys=True).encode())
        for im in self.images:
            h.update(im.tobytes())
        return h.hexdigest()

    def save(self, root) -> Path:
        """Write PNG images plus ``manifest.json`` under ``root``."""
        root = Path(root)
        (root / "images").mkdir(parents=True, exist_ok=True)
        entries = []
        for rec, im in zip(self.records, self.images):
            fname = f"images/{rec['id']}.png"
            Image.fromarray(im).save(root / fname)
            entries.append({**rec, "file": fname, "width": self.config.canvas, "height": self.config.canvas})
        manifest = {"format": SHAPES_FORMAT, "config": self.config.to_dict(),
                    "class_names": list(self.config.classes), "images": entries}
        path = root / "manifest.json"
        path.write_text(json.dumps(manifest, indent=1))
        return path


def generate_shapes(cfg: ShapesConfig) -> ShapesDataset:
    """Deterministic synthetic dataset: every image and box is a pure function of ``cfg``."""
    rng = np.random.default_rng(cfg.seed)
    images, records = [], []
    for i in range(cfg.num_images):
        img, objs = _render(cfg, rng)
        images.append(img)
        records.append({"id": f"s{cfg.seed}-{i:05d}", "objects": objs})
    return ShapesDataset(cfg, images, records)


def load_shapes(root) -> ShapesDataset:
    root = Path(root)
    path = root / "manifest.json" if root.is_dir() else root
    if not path.exists():
        raise FileNotFoundError(f"missing shapes manifest {path}")
    try:
        manifest = json.loads(path.read_text())
        if manifest.get("format") != SHAPES_FORMAT:
            raise DatasetError(f"{path}: unsupported manifest format {manifest.get('format')!r}")
        cfg = ShapesConfig(**manifest["config"])
        records, images = [], []
        for e in manifest["images"]:
            for o in e["objects"]:
                if o["class"] not in cfg.classes:
                    raise DatasetError(f"{path}: unknown class name {o['class']!r}")
            records.append({"id": e["id"], "objects": e["objects"]})
            with Image.open(path.parent / e["file"]) as im:
                images.append(np.asarray(im.convert("RGB")))
    except (KeyError, TypeError, json.JSONDecodeError) as e:
        raise DatasetError(f"{path}: malformed manifest ({e})") from e
    return ShapesDataset(cfg, images, records)


def class_order(dataset_kind: str, class_names: Sequence[str]) -> list[str]:
    """Task ordering convention: alphabetical for VOC, given order otherwise."""
    if dataset_kind == "voc":
        return sorted(class_names)
    return list(class_names)
