import pytest

from lifelong_det.evaluation import MetricsReport
from lifelong_det.plotting import map_series, plot_map_vs_classes, plot_recall, recall_series

GRID = [0.5, 0.6, 0.7, 0.8, 0.9]


def report(classes, old, map_all, curves=None):
    new = [c for c in classes if c not in old]
    return MetricsReport(classes, {c: map_all for c in classes}, old, new, map_all, map_all if new else None,
                         map_all, "area", recall_curves=curves or {})


def curve(values):
    return {"iou_thresholds": GRID, "recall": values, "budget": 300, "num_gt": 10}


def test_map_series_and_figure(tmp_path):
    stages = [report(["a", "b"], ["a", "b"], 0.8), report(["a", "b", "c"], ["a", "b"], 0.6),
              report(["a", "b", "c", "d"], ["a", "b"], 0.5)]
    paths, series = plot_map_vs_classes({"ppas": stages}, tmp_path / "map")
    assert series == {"ppas": ([2, 3, 4], [0.8, 0.6, 0.5])}
    assert [p.suffix for p in paths] == [".png", ".svg"] and all(p.stat().st_size > 0 for p in paths)


def test_map_series_skips_missing():
    assert map_series({"x": [report(["a"], ["a"], None)]}) == {"x": ([], [])}
    with pytest.raises(ValueError):
        plot_map_vs_classes({"x": [report(["a"], ["a"], None)]}, "unused")


def test_recall_three_panels(tmp_path):
    curves = {"300": {"old": curve([0.9, 0.8, 0.6, 0.3, 0.1]), "new": None,
                      "all": curve([0.9, 0.85, 0.6, 0.35, 0.1])}}
    reps = {"ppas": report(["a", "b"], ["a"], 0.5, curves)}
    paths, series = plot_recall(reps, 300, tmp_path / "recall_300")
    assert set(series) == {"old", "new", "all"}
    assert series["old"]["ppas"] == (GRID, [0.9, 0.8, 0.6, 0.3, 0.1])
    assert series["new"] == {}
    assert all(p.exists() for p in paths)
    assert "<svg" in (tmp_path / "recall_300.svg").read_text()[:500]


def test_recall_missing_budget():
    reps = {"x": report(["a"], ["a"], 0.5, {"300": {"all": curve([1, 1, 1, 1, 1])}})}
    assert recall_series(reps, 2000) == {"old": {}, "new": {}, "all": {}}
    with pytest.raises(ValueError, match="2000"):
        plot_recall(reps, 2000, "unused")
