import json
from collections import Counter

import numpy as np
import pytest
from PIL import Image, ImageDraw

from lifelong_det.data import (
    VOC_CLASSES, Annotation, DatasetError, InMemoryDataset, ShapesConfig, TaskView, _draw_shape,
    class_order, generate_shapes, hflip, load_coco, load_shapes, load_voc, parse_voc_xml, voc_xml,
)


@pytest.fixture(scope="module")
def shapes():
    return generate_shapes(ShapesConfig(num_images=60, seed=4))


class TestShapes:
    def test_deterministic(self):
        a = generate_shapes(ShapesConfig(num_images=10, seed=1))
        b = generate_shapes(ShapesConfig(num_images=10, seed=1))
        c = generate_shapes(ShapesConfig(num_images=10, seed=2))
        assert a.digest() == b.digest() != c.digest()

    def test_object_counts_and_sizes(self, shapes):
        for i in range(len(shapes)):
            s = shapes[i]
            assert 1 <= len(s.boxes) <= 3
            wh = s.boxes[:, 2:] - s.boxes[:, :2]
            assert (wh >= 10).all() and (wh <= 52).all()
            assert (s.boxes >= 0).all() and (s.boxes <= 128).all()
            assert s.image.shape == (128, 128, 3) and s.image.dtype == np.uint8

    @pytest.mark.parametrize("kind", ["circle", "square", "triangle", "star", "cross", "hexagon"])
    def test_boxes_are_tight_on_raster(self, kind):
        rng = np.random.default_rng(0)
        for _ in range(10):
            s = int(rng.integers(24, 53))
            x1, y1 = (int(v) for v in rng.integers(0, 128 - s, 2))
            img = Image.new("L", (128, 128))
            box = _draw_shape(ImageDraw.Draw(img), kind, x1, y1, s, 255)
            ys, xs = np.nonzero(np.asarray(img))
            raster = [xs.min(), ys.min(), xs.max() + 1, ys.max() + 1]
            np.testing.assert_allclose(box, raster, atol=1)

    def test_class_histogram_follows_weights(self):
        cfg = ShapesConfig(num_images=600, seed=3, class_weights=(4, 2, 1, 1))
        ds = generate_shapes(cfg)
        counts = Counter(c for a in ds.annotations for c in a.classes)
        total = sum(counts.values())
        expected = np.array([4, 2, 1, 1]) / 8 * total
        observed = np.array([counts[c] for c in cfg.classes])
        chi2 = ((observed - expected) ** 2 / expected).sum()
        assert chi2 < 16.3  # 3 dof, p = 0.001

    def test_save_load_roundtrip(self, shapes, tmp_path):
        shapes.save(tmp_path)
        again = load_shapes(tmp_path)
        assert again.digest() == shapes.digest()

    def test_load_rejects_unknown_class(self, shapes, tmp_path):
        path = shapes.save(tmp_path)
        m = json.loads(path.read_text())
        m["images"][0]["objects"][0]["class"] = "blob"
        path.write_text(json.dumps(m))
        with pytest.raises(DatasetError, match="unknown class name"):
            load_shapes(tmp_path)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            ShapesConfig(classes=("circle", "blob"))
        with pytest.raises(DatasetError):
            generate_shapes(ShapesConfig(canvas=16, num_images=1))


class TestTaskView:
    def test_hidden_classes_absent(self, shapes):
        view = TaskView(shapes, ["circle", "square"])
        for i in range(len(view)):
            s = view[i]
            assert set(s.classes) <= {"circle", "square"}
            assert len(s.classes) == len(s.boxes) >= 1

    def test_index_covers_exactly_visible_images(self, shapes):
        view = TaskView(shapes, ["star"])
        want = [i for i, a in enumerate(shapes.annotations) if "star" in a.classes]
        assert view.index == want

    def test_errors(self, shapes):
        with pytest.raises(DatasetError):
            TaskView(shapes, [])
        with pytest.raises(DatasetError, match="unknown"):
            TaskView(shapes, ["dog"])


def test_hflip_involution(shapes):
    s = shapes[0]
    f = hflip(hflip(s))
    assert np.array_equal(f.image, s.image)
    np.testing.assert_allclose(f.boxes, s.boxes)
    once = hflip(s)
    np.testing.assert_allclose(once.boxes[:, 0], 128 - s.boxes[:, 2])


def write_voc(root, anns):
    (root / "Annotations").mkdir(parents=True)
    (root / "ImageSets" / "Main").mkdir(parents=True)
    (root / "JPEGImages").mkdir(parents=True)
    for a in anns:
        (root / "Annotations" / f"{a.image_id}.xml").write_text(voc_xml(a))
        Image.new("RGB", (a.width, a.height)).save(root / "JPEGImages" / f"{a.image_id}.jpg")
    (root / "ImageSets" / "Main" / "trainval.txt").write_text("\n".join(a.image_id for a in anns))


class TestVOC:
    def ann(self, i=0):
        return Annotation(f"{i:06d}", 64, 48, np.array([[0.0, 1.0, 20.0, 30.0], [5.0, 5.0, 64.0, 48.0]]),
                          ["dog", "person"], np.array([False, True]))

    def test_roundtrip(self, tmp_path):
        write_voc(tmp_path, [self.ann(0), self.ann(1)])
        ds = load_voc(tmp_path, "trainval", class_names=VOC_CLASSES)
        assert len(ds) == 2
        s = ds[1]
        np.testing.assert_allclose(s.boxes, self.ann().boxes)
        assert s.classes == ["dog", "person"] and s.difficult.tolist() == [False, True]
        assert s.image.shape == (48, 64, 3)

    def test_one_based_conversion(self, tmp_path):
        p = tmp_path / "a.xml"
        p.write_text("<annotation><size><width>10</width><height>10</height></size><object><name>cat</name>"
                     "<bndbox><xmin>1</xmin><ymin>1</ymin><xmax>10</xmax><ymax>10</ymax></bndbox></object></annotation>")
        assert parse_voc_xml(p).boxes.tolist() == [[0, 0, 10, 10]]

    def test_corrupt_xml_names_file(self, tmp_path):
        p = tmp_path / "broken.xml"
        p.write_text("<annotation><size>")
        with pytest.raises(DatasetError, match="broken.xml"):
            parse_voc_xml(p)

    def test_unknown_class(self, tmp_path):
        a = self.ann()
        a.classes = ["dragon", "person"]
        p = tmp_path / "x.xml"
        p.write_text(voc_xml(a))
        with pytest.raises(DatasetError, match="dragon"):
            parse_voc_xml(p)

    def test_missing_split(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_voc(tmp_path)

    def test_resize_scales_boxes(self, tmp_path):
        write_voc(tmp_path, [self.ann()])
        s = load_voc(tmp_path, shorter_side=96)[0]
        assert s.image.shape[:2] == (96, 128)
        np.testing.assert_allclose(s.boxes, self.ann().boxes * 2)


def test_coco_loader(tmp_path):
    (tmp_path / "annotations").mkdir()
    (tmp_path / "val").mkdir()
    Image.new("RGB", (32, 16)).save(tmp_path / "val" / "a.jpg")
    data = {
        "images": [{"id": 7, "file_name": "a.jpg", "width": 32, "height": 16}],
        "categories": [{"id": 3, "name": "zebra"}, {"id": 1, "name": "ant"}],
        "annotations": [
            {"image_id": 7, "category_id": 3, "bbox": [1, 2, 10, 5], "iscrowd": 0},
            {"image_id": 7, "category_id": 1, "bbox": [0, 0, 4, 4], "iscrowd": 1},
        ],
    }
    (tmp_path / "annotations" / "instances_val.json").write_text(json.dumps(data))
    ds = load_coco(tmp_path, "val")
    assert ds.class_names == ["ant", "zebra"]
    s = ds[0]
    assert s.classes == ["zebra"] and s.boxes.tolist() == [[1, 2, 11, 7]]


def test_class_order():
    assert class_order("voc", ["b", "a"]) == ["a", "b"]
    assert class_order("shapes", ["b", "a"]) == ["b", "a"]


def test_in_memory_dataset():
    ann = Annotation("x", 4, 4, np.zeros((0, 4)), [], np.zeros(0, bool))
    ds = InMemoryDataset(["a"], [ann], [np.zeros((4, 4, 3), np.uint8)])
    assert len(ds[0].boxes) == 0
