import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lifelong_det import geometry
from lifelong_det.geometry import GeometryError, decode, encode, generate_anchors, iou, iou_matrix, nms

from oracles import greedy_nms, iou_raster, iou_scalar


def random_boxes(rng, n, size=100.0, min_wh=1.0):
    xy = rng.uniform(0, size, (n, 2))
    wh = rng.uniform(min_wh, size / 2, (n, 2))
    return np.concatenate([xy, xy + wh], 1)


box_st = st.tuples(
    st.floats(0, 100), st.floats(0, 100), st.floats(1, 50), st.floats(1, 50),
).map(lambda t: [t[0], t[1], t[0] + t[2], t[1] + t[3]])


class TestIoU:
    def test_identical(self):
        assert iou([0, 0, 10, 10], [0, 0, 10, 10]) == 1.0

    def test_disjoint(self):
        assert iou([0, 0, 10, 10], [20, 20, 30, 30]) == 0.0

    def test_half_shift_matches_raster(self):
        expected = iou_raster([0, 0, 10, 10], [5, 0, 15, 10])
        assert expected == pytest.approx(1 / 3)
        assert iou([0, 0, 10, 10], [5, 0, 15, 10]) == pytest.approx(expected, abs=1e-12)

    def test_degenerate_is_zero(self):
        assert iou([5, 5, 5, 5], [5, 5, 5, 5]) == 0.0
        assert iou([0, 0, 0, 10], [0, 0, 10, 10]) == 0.0

    def test_integer_boxes_match_raster(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            a = rng.integers(0, 20, 2)
            b = rng.integers(0, 20, 2)
            ba = [*a, *(a + rng.integers(1, 12, 2))]
            bb = [*b, *(b + rng.integers(1, 12, 2))]
            assert iou(ba, bb) == pytest.approx(iou_raster(ba, bb), abs=1e-12)

    @given(box_st, box_st)
    def test_symmetric_and_bounded(self, a, b):
        v = iou(a, b)
        assert v == pytest.approx(iou(b, a), abs=1e-12)
        assert 0.0 <= v <= 1.0
        assert v == pytest.approx(iou_scalar(a, b), abs=1e-9)

    def test_matrix_shape_empty(self):
        assert iou_matrix(np.zeros((0, 4)), np.ones((3, 4))).shape == (0, 3)


class TestEncodeDecode:
    def test_self_encoding_is_zero(self):
        b = np.array([[3.0, 4.0, 20.0, 30.0]])
        np.testing.assert_allclose(encode(b, b), 0.0, atol=1e-12)

    def test_zero_delta_is_identity(self):
        a = np.array([[3.0, 4.0, 20.0, 30.0]])
        np.testing.assert_allclose(decode(np.zeros((1, 4)), a), a, atol=1e-12)

    def test_roundtrip_random(self):
        rng = np.random.default_rng(0)
        t = random_boxes(rng, 1000)
        a = random_boxes(rng, 1000)
        for w in [(1, 1, 1, 1), (10, 10, 5, 5)]:
            err = np.abs(decode(encode(t, a, w), a, w) - t).max()
            assert err < 1e-5

    def test_degenerate_anchor(self):
        with pytest.raises(GeometryError, match="degenerate anchor"):
            encode([[0, 0, 1, 1]], [[0, 0, 0, 5]])
        with pytest.raises(GeometryError, match="degenerate anchor"):
            decode([[0, 0, 0, 0]], [[2, 2, 5, 2]])

    @given(box_st, box_st)
    @settings(max_examples=200)
    def test_bijective(self, t, a):
        back = decode(encode([t], [a]), [a])[0]
        np.testing.assert_allclose(back, t, rtol=1e-5, atol=1e-5)


class TestNMS:
    def test_identical_keeps_higher(self):
        b = [[0, 0, 10, 10], [0, 0, 10, 10]]
        assert nms(b, [0.9, 0.8], 0.7).tolist() == [0]

    def test_disjoint_keeps_both(self):
        b = [[0, 0, 10, 10], [20, 20, 30, 30]]
        assert nms(b, [0.8, 0.9], 0.7).tolist() == [1, 0]

    def test_empty(self):
        assert len(nms(np.zeros((0, 4)), [], 0.5)) == 0

    def test_ties_prefer_lower_index(self):
        b = [[0, 0, 10, 10], [0, 0, 10, 10]]
        assert nms(b, [0.5, 0.5], 0.5).tolist() == [0]

    @pytest.mark.parametrize("seed", range(20))
    def test_matches_bruteforce(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, 100))
        b = random_boxes(rng, n, size=60)
        s = rng.random(n)
        thr = float(rng.uniform(0.2, 0.8))
        assert nms(b, s, thr).tolist() == greedy_nms(b.tolist(), s.tolist(), thr)
        assert nms(b, s, thr, 5).tolist() == greedy_nms(b.tolist(), s.tolist(), thr, 5)

    def test_large_input_path_matches_small(self):
        rng = np.random.default_rng(1)
        b = random_boxes(rng, 4500, size=400)
        s = rng.random(4500)
        keep = nms(b, s, 0.6)
        small = np.flatnonzero(np.isin(np.arange(4500), keep))
        # every pair of kept boxes is below threshold and scores descend
        ov = iou_matrix(b[keep], b[keep])
        np.fill_diagonal(ov, 0)
        assert ov.max() <= 0.6
        assert np.all(np.diff(s[keep]) <= 0)
        assert len(small) == len(keep)

    @given(st.lists(box_st, min_size=1, max_size=30), st.floats(0.1, 0.9), st.integers(0, 2**31 - 1))
    @settings(max_examples=60, deadline=None)
    def test_properties(self, boxes, thr, seed):
        s = np.random.default_rng(seed).random(len(boxes))
        keep = nms(boxes, s, thr)
        b = np.asarray(boxes)
        assert np.all(np.diff(s[keep]) <= 0)
        ov = iou_matrix(b[keep], b[keep])
        np.fill_diagonal(ov, 0)
        assert (ov <= thr).all()
        again = keep[nms(b[keep], s[keep], thr)]
        assert again.tolist() == keep.tolist()

    def test_torchvision_kernel_agrees(self):
        torch = pytest.importorskip("torch")
        from torchvision.ops import nms as tv_nms
        rng = np.random.default_rng(5)
        for _ in range(20):
            b = random_boxes(rng, 300, size=120)
            s = rng.random(300)
            ref = nms(b, s, 0.7)
            got = tv_nms(torch.from_numpy(b), torch.from_numpy(s), 0.7).numpy()
            assert ref.tolist() == got.tolist()


class TestAnchors:
    def test_count_law(self):
        g = generate_anchors((64, 64), 16, (1, 2, 4), (0.5, 1, 2))
        assert len(g) == 4 * 4 * 9

    def test_deterministic(self):
        a = generate_anchors((64, 96), 16).boxes
        b = generate_anchors((64, 96), 16).boxes
        assert np.array_equal(a, b)

    def test_centres_on_grid(self):
        g = generate_anchors((80, 48), 16, (1.0, 2.0), (0.5, 1.0, 2.0))
        centres = np.stack([(g.boxes[:, 0] + g.boxes[:, 2]) / 2, (g.boxes[:, 1] + g.boxes[:, 3]) / 2], 1)
        a = g.num_per_position
        for i in range(g.feat_height):
            for j in range(g.feat_width):
                block = centres[(i * g.feat_width + j) * a:(i * g.feat_width + j + 1) * a]
                np.testing.assert_allclose(block[:, 0], (j + 0.5) * 16, atol=1e-9)
                np.testing.assert_allclose(block[:, 1], (i + 0.5) * 16, atol=1e-9)

    def test_shapes_follow_scale_and_ratio(self):
        shapes = geometry.base_anchors(16, (2.0,), (0.5, 2.0))
        w = shapes[:, 2] - shapes[:, 0]
        h = shapes[:, 3] - shapes[:, 1]
        np.testing.assert_allclose(w * h, 32.0 ** 2)
        np.testing.assert_allclose(h / w, [0.5, 2.0])

    def test_too_small_image(self):
        with pytest.raises(GeometryError, match="no feature positions"):
            generate_anchors((8, 64), 16)


def test_batched_nms_is_per_label():
    b = [[0, 0, 10, 10], [0, 0, 10, 10], [0, 0, 10, 10]]
    keep = geometry.batched_nms(b, [0.9, 0.8, 0.7], [0, 1, 0], 0.5)
    assert keep.tolist() == [0, 1]


def test_clip_boxes():
    out = geometry.clip_boxes([[-5, -2, 130, 50]], 128, 40)
    assert out.tolist() == [[0, 0, 128, 40]]
