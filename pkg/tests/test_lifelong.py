import json

import numpy as np
import pytest
import torch

from lifelong_det.data import ShapesConfig, TaskView, generate_shapes
from lifelong_det.detector import Detector, DetectorConfig, extend_classes, load_checkpoint, weights_digest
from lifelong_det.evaluation import evaluate_detector
from lifelong_det.lifelong import (
    DistillConfig, TaskSpec, TeacherSnapshot, TrainSchedule, budget_for_task, compute_losses,
    run_task_sequence, train_base, train_incremental,
)
from lifelong_det.sampling import SamplerConfig

OLD = ["circle", "square"]
NEW = ["triangle"]


@pytest.fixture(scope="module")
def data():
    return generate_shapes(ShapesConfig(num_images=16, seed=11, classes=("circle", "square", "triangle", "star")))


@pytest.fixture(scope="module")
def teacher_det():
    torch.manual_seed(0)
    cfg = DetectorConfig(num_classes=2, width=16, head_dim=32, anchor_scales=(1.5, 2.5, 3.5))
    return Detector(cfg).eval()


def quick(iters=4):
    return TrainSchedule(iterations=iters, lr=0.01, lr_step=None, warmup=0)


class TestSchedule:
    def test_lr_step_and_warmup(self):
        s = TrainSchedule(iterations=100, lr=0.1, lr_step=50, lr_after_step=0.01, warmup=10)
        assert s.lr_at(0) == pytest.approx(0.01)
        assert s.lr_at(9) == pytest.approx(0.1)
        assert s.lr_at(49) == 0.1 and s.lr_at(50) == 0.01

    def test_budget_law(self):
        assert [budget_for_task(n, per_class=4000) for n in (1, 2, 5)] == [4000, 8000, 20000]
        assert budget_for_task(1) == 4000 and budget_for_task(10, base_iterations=70000) == 70000

    def test_invalid(self):
        with pytest.raises(ValueError):
            TrainSchedule(iterations=0)
        with pytest.raises(ValueError):
            DistillConfig(freeze=("head",))


class TestTaskSpec:
    def test_seen(self):
        t = TaskSpec(["a", "b", "c", "d"], ["a", "b"], [["c"], ["d"]])
        assert t.seen_after(0) == ["a", "b"] and t.seen_after(2) == ["a", "b", "c", "d"]

    def test_readd(self):
        with pytest.raises(ValueError, match="re-added"):
            TaskSpec(["a", "b"], ["a"], [["a"]])

    def test_unknown(self):
        with pytest.raises(ValueError):
            TaskSpec(["a"], ["a"], [["z"]])


class TestTeacher:
    def test_cache_consistency(self, teacher_det, data, tmp_path):
        img = data[0].image
        t = TeacherSnapshot(teacher_det, OLD, cache=True, cache_dir=tmp_path)
        a = t.outputs(img)
        b = t.outputs(img)
        assert t.hits == 1 and t.misses == 1
        fresh = t.compute(img)
        for f in ("rpn_probs", "rpn_deltas", "proposals", "rcnn_logits", "rcnn_deltas"):
            np.testing.assert_array_equal(getattr(a, f), getattr(b, f))
            np.testing.assert_allclose(getattr(a, f), getattr(fresh, f), atol=1e-6)
        # a second snapshot of the same weights reads the disk cache
        t2 = TeacherSnapshot(teacher_det, OLD, cache=True, cache_dir=tmp_path)
        c = t2.outputs(img)
        assert t2.hits == 1
        np.testing.assert_array_equal(c.rcnn_logits, a.rcnn_logits)

    def test_flip_is_a_distinct_key(self, data):
        img = data[0].image
        assert TeacherSnapshot.key(img) != TeacherSnapshot.key(img[:, ::-1])

    def test_snapshot_is_a_copy(self, teacher_det):
        t = TeacherSnapshot(teacher_det, OLD, cache=False)
        with torch.no_grad():
            next(teacher_det.parameters()).add_(0.0)
        assert t.detector is not teacher_det
        assert not any(p.requires_grad for p in t.detector.parameters())


class TestLosses:
    def test_distillation_is_zero_at_init(self, teacher_det, data):
        # a freshly extended student reproduces the teacher, so both distillation terms vanish
        teacher = TeacherSnapshot(teacher_det, OLD, cache=False)
        student = extend_classes(teacher.detector, 1, rng_seed=0)
        view = TaskView(data, NEW)
        out = compute_losses(student, teacher, view[0], OLD + NEW, SamplerConfig(), DistillConfig(),
                             np.random.default_rng(0))
        assert float(out.rcnn_dist_cls.detach()) < 1e-6
        assert float(out.rcnn_dist_reg.detach()) < 1e-6
        assert float(out.rpn_dist_reg.detach()) < 1e-6

    def test_fine_tune_has_no_distillation(self, teacher_det, data):
        teacher = TeacherSnapshot(teacher_det, OLD, cache=False)
        student = extend_classes(teacher.detector, 1)
        out = compute_losses(student, teacher, TaskView(data, NEW)[0], OLD + NEW,
                             SamplerConfig().with_ablation("no-ppas"), DistillConfig(lambda2=0, lambda3=0),
                             np.random.default_rng(0))
        assert float(out.l_rpn_dist.detach()) == 0.0 and float(out.l_rcnn_dist.detach()) == 0.0
        assert float(out.total.detach()) == pytest.approx(float((out.l_rpn + out.l_rcnn).detach()))


class TestTraining:
    def test_deterministic(self, data):
        cfg = DetectorConfig(num_classes=2, width=16, head_dim=32, anchor_scales=(1.5, 2.5, 3.5))
        a = train_base(TaskView(data, OLD), OLD, cfg, quick(), seed=3)
        b = train_base(TaskView(data, OLD), OLD, cfg, quick(), seed=3)
        assert weights_digest(a) == weights_digest(b)

    def test_base_rejects_class_mismatch(self, data):
        with pytest.raises(ValueError):
            train_base(TaskView(data, OLD), OLD, DetectorConfig(num_classes=3), quick())

    def test_incremental_keeps_teacher_and_logs(self, teacher_det, data, tmp_path):
        before = weights_digest(teacher_det)
        student, audit = train_incremental(teacher_det, OLD, NEW, TaskView(data, NEW), quick(3), SamplerConfig(),
                                           DistillConfig(), log_path=tmp_path / "log.csv")
        assert audit["teacher_unchanged"] and weights_digest(teacher_det) == before
        assert student.num_classes == 3
        rows = (tmp_path / "log.csv").read_text().strip().splitlines()
        assert rows[0].startswith("step,lr,total") and len(rows) == 4
        assert weights_digest(student) != before

    def test_incremental_rejects_readd(self, teacher_det, data):
        with pytest.raises(ValueError, match="re-added"):
            train_incremental(teacher_det, OLD, ["circle"], TaskView(data, ["circle"]), quick(1),
                              SamplerConfig(), DistillConfig())

    def test_frozen_groups_do_not_move(self, teacher_det, data):
        student, _ = train_incremental(teacher_det, OLD, NEW, TaskView(data, NEW), quick(3),
                                       SamplerConfig().with_ablation("no-ppas"),
                                       DistillConfig(lambda2=0, lambda3=0, freeze=("backbone", "rpn")))
        for (name, p), (_, q) in zip(teacher_det.rpn.named_parameters(), student.rpn.named_parameters()):
            assert torch.equal(p, q), name
        for p, q in zip(teacher_det.backbone.body.parameters(), student.backbone.body.parameters()):
            assert torch.equal(p, q)


def test_run_task_sequence(teacher_det, data, tmp_path):
    spec = TaskSpec(["circle", "square", "triangle", "star"], OLD, [["triangle"], ["star"]])

    def ev(det, seen, old, new):
        return evaluate_detector(det, data, seen, old, new, recall_budgets=[10, 50])

    stages = run_task_sequence(spec, (teacher_det, OLD), data, data, lambda n: quick(2), SamplerConfig(),
                               DistillConfig(), tmp_path, evaluate=ev)
    assert [len(s["classes"]) for s in stages] == [2, 3, 4]
    for k in range(3):
        assert (tmp_path / f"stage-{k}" / "checkpoint.pt").exists()
        m = json.loads((tmp_path / f"stage-{k}" / "metrics.json").read_text())
        assert set(m["per_class"]) == set(spec.seen_after(k))
    assert all(s["audit"]["teacher_unchanged"] for s in stages[1:])
    det, names, _ = load_checkpoint(tmp_path / "stage-2" / "checkpoint.pt")
    assert names == spec.seen_after(2) and det.num_classes == 4
    # resuming loads existing checkpoints instead of retraining
    again = run_task_sequence(spec, (teacher_det, OLD), data, data, lambda n: quick(2), SamplerConfig(),
                              DistillConfig(), tmp_path)
    assert [s["checkpoint"] for s in again] == [s["checkpoint"] for s in stages]
