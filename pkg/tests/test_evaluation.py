import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lifelong_det.evaluation import (
    ImageDetections, ImageTruth, MetricsReport, average_precision, build_report, class_ap, coco_map,
    forgetting, grouped_recall, match_detections, mean_ap, proposal_recall,
)

from oracles import ap_hand, greedy_match, recall_bruteforce


def jitter(rng, boxes, s):
    return boxes + rng.normal(0, s, boxes.shape)


def random_boxes(rng, n):
    xy = rng.uniform(0, 100, (n, 2))
    return np.concatenate([xy, xy + rng.uniform(10, 40, (n, 2))], 1)


class TestAP:
    def test_perfect(self):
        assert average_precision([1, 1, 1], 3, "area") == 1.0
        assert average_precision([1, 1, 1], 3, "voc07-11pt") == pytest.approx(1.0)

    def test_half_recall(self):
        assert average_precision([1, 0], 2, "area") == pytest.approx(0.5)
        assert average_precision([1], 2, "voc07-11pt") == pytest.approx(6 / 11)

    def test_all_fp(self):
        assert average_precision([0, 0, 0], 3, "area") == 0.0

    def test_no_gt_is_none(self):
        assert average_precision([0, 0], 0) is None

    def test_bad_style(self):
        with pytest.raises(ValueError, match="unknown AP style"):
            average_precision([1], 1, "foo")

    @given(st.lists(st.booleans(), min_size=1, max_size=60), st.integers(0, 20), st.sampled_from(["area", "voc07-11pt"]))
    @settings(max_examples=200)
    def test_matches_longhand(self, flags, extra_gt, style):
        num_gt = sum(flags) + extra_gt
        if num_gt == 0:
            return
        got = average_precision(np.array(flags, int), num_gt, style)
        assert got == pytest.approx(ap_hand(flags, num_gt, style), abs=1e-12)
        assert 0.0 <= got <= 1.0

    def test_appending_fp_never_helps(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            f = list(rng.integers(0, 2, 20))
            n = sum(f) + 2
            assert average_precision(f + [0], n) <= average_precision(f, n) + 1e-12


class TestMatching:
    def test_duplicate_is_fp(self):
        assert match_detections([[0, 0, 10, 10], [0, 0, 10, 10]], [[0, 0, 10, 10]], 0.5).tolist() == [1, 0]

    def test_difficult_ignored(self):
        flags = match_detections([[0, 0, 10, 10]], [[0, 0, 10, 10]], 0.5, [True])
        assert flags.tolist() == [-1]
        assert average_precision(flags, 0) is None

    @pytest.mark.parametrize("seed", range(15))
    def test_matches_oracle(self, seed):
        rng = np.random.default_rng(seed)
        gt = random_boxes(rng, int(rng.integers(1, 8)))
        det = np.concatenate([jitter(rng, gt, 4), random_boxes(rng, 5)])[rng.permutation(len(gt) + 5)]
        for thr in (0.3, 0.5, 0.75):
            assert match_detections(det, gt, thr).tolist() == greedy_match(det.tolist(), gt.tolist(), thr)

    def test_class_ap_end_to_end(self):
        truths = [ImageTruth([[0, 0, 10, 10], [20, 20, 30, 30]], [0, 1]), ImageTruth([[5, 5, 15, 15]], [0])]
        dets = [ImageDetections(np.array([[0, 0, 10, 10], [40, 40, 50, 50]]), np.array([0.9, 0.8]), np.array([0, 0])),
                ImageDetections(np.array([[5, 5, 15, 15]]), np.array([0.7]), np.array([0]))]
        # ranked TP, FP, TP over 2 gt -> area AP = 0.5*1 + 0.5*(2/3)
        assert class_ap(dets, truths, 0) == pytest.approx(0.5 + 1 / 3)
        assert class_ap(dets, truths, 1) == 0.0
        assert class_ap(dets, truths, 2) is None

    def test_coco_perfect_detector_is_one(self):
        rng = np.random.default_rng(0)
        truths, dets = [], []
        for _ in range(5):
            b = random_boxes(rng, 3)
            truths.append(ImageTruth(b, [0, 1, 0]))
            dets.append(ImageDetections(b.copy(), np.array([0.9, 0.8, 0.7]), np.array([0, 1, 0])))
        assert coco_map(dets, truths, 2) == pytest.approx(1.0)


class TestRecall:
    @pytest.mark.parametrize("seed", range(5))
    def test_matches_bruteforce(self, seed):
        rng = np.random.default_rng(seed)
        gts = [random_boxes(rng, int(rng.integers(0, 4))) for _ in range(6)]
        props = [np.concatenate([jitter(rng, g, 5), random_boxes(rng, 20)]) for g in gts]
        thr = [0.5, 0.6, 0.7, 0.8, 0.9]
        curve = proposal_recall(props, gts, thr, budget=None)
        want = recall_bruteforce([p.tolist() for p in props], [g.tolist() for g in gts], thr)
        if want is None:
            assert curve is None
        else:
            np.testing.assert_allclose(curve.recall, want, atol=1e-12)

    def test_monotone_in_threshold_and_budget(self):
        rng = np.random.default_rng(1)
        gts = [random_boxes(rng, 3) for _ in range(10)]
        props = [np.concatenate([random_boxes(rng, 50), jitter(rng, g, 3)]) for g in gts]
        thr = np.round(np.arange(0.5, 0.951, 0.05), 2)
        small = proposal_recall(props, gts, thr, 20)
        big = proposal_recall(props, gts, thr, 200)
        assert np.all(np.diff(big.recall) <= 1e-12)
        assert np.all(np.asarray(big.recall) >= np.asarray(small.recall))

    def test_no_gt_is_none(self):
        assert proposal_recall([np.zeros((3, 4))], [np.zeros((0, 4))], [0.5]) is None

    def test_grouped(self):
        truths = [ImageTruth([[0, 0, 10, 10], [50, 50, 60, 60]], [0, 1])]
        props = [np.array([[0, 0, 10, 10]])]
        g = grouped_recall(props, truths, {"old": [0], "new": [1], "all": [0, 1], "none": [5]}, [0.5], 10)
        assert g["old"].recall == [1.0]
        assert g["new"].recall == [0.0]
        assert g["all"].recall == [0.5]
        assert g["none"] is None


class TestReport:
    def test_build_and_roundtrip(self, tmp_path):
        r = build_report([0.5, None, 0.9], ["a", "b", "c"], ["a", "b"], ["c"], "area")
        assert r.map_old == 0.5 and r.map_new == 0.9 and r.map_all == pytest.approx(0.7)
        r.save(tmp_path / "m.json")
        assert MetricsReport.load(tmp_path / "m.json") == r

    def test_forgetting(self):
        before = build_report([0.8, 0.6], ["a", "b"], ["a", "b"], [], "area")
        after = build_report([0.5, 0.6, 0.7], ["a", "b", "c"], ["a", "b"], ["c"], "area")
        assert forgetting(before, after) == pytest.approx({"a": 0.3, "b": 0.0})

    def test_mean_ap_skips_none(self):
        assert mean_ap([None, None]) is None
        assert mean_ap([None, 0.5, 1.0]) == 0.75
