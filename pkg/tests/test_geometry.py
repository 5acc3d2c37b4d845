import math

import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st

from actiontx import geometry as geo

coord = st.floats(-50, 150, allow_nan=False)


@st.composite
def boxes(draw, min_size=0.5):
    x1, y1 = draw(coord), draw(coord)
    w = draw(st.floats(min_size, 80))
    h = draw(st.floats(min_size, 80))
    return (x1, y1, x1 + w, y1 + h)


def test_iou_identity_and_disjoint():
    b = (3.0, 4.0, 10.0, 12.0)
    assert geo.iou(b, b) == 1.0
    assert geo.iou((0, 0, 1, 1), (2, 2, 3, 3)) == 0.0


def test_iou_overlapping_squares_is_one_seventh():
    assert geo.iou((0, 0, 2, 2), (1, 1, 3, 3)) == pytest.approx(1 / 7, abs=1e-15)


def test_iou_degenerate_union_is_zero():
    assert geo.iou((1, 1, 1, 1), (1, 1, 1, 1)) == 0.0


@given(boxes(), boxes())
def test_iou_symmetric_and_bounded(a, b):
    v = geo.iou(a, b)
    assert 0.0 <= v <= 1.0
    assert v == geo.iou(b, a)
    assert geo.iou_matrix(np.array([a]), np.array([b]))[0, 0] == pytest.approx(v, abs=1e-12)


def test_decode_clamps_extreme_scale():
    a = np.array([0.0, 0, 1, 1])
    b = geo.decode_deltas(a, np.array([0, 0, 50.0, 0]))
    assert b[2] - b[0] == pytest.approx(1000.0 / 16.0)


def test_deltas_zero_for_identical_box():
    a = np.array([2.0, 3.0, 12.0, 23.0])
    np.testing.assert_array_equal(geo.encode_deltas(a, a), np.zeros(4))


def test_log_width_delta_is_ln2():
    d = geo.encode_deltas(np.array([0.0, 0, 10, 10]), np.array([0.0, 0, 20, 10]))
    assert d[2] == pytest.approx(math.log(2), abs=1e-15)
    assert d[3] == 0.0
    assert d[0] == pytest.approx(0.5)


def test_degenerate_anchor_rejected():
    with pytest.raises(ValueError):
        geo.encode_deltas(np.array([0.0, 0, 0, 5]), np.array([0.0, 0, 2, 2]))
    with pytest.raises(ValueError):
        geo.decode_deltas(np.array([0.0, 0, 5, 0]), np.zeros(4))


def test_roundtrip_1000_random_pairs():
    rng = np.random.default_rng(7)
    xy = rng.uniform(-20, 80, size=(1000, 2, 2))
    wh = rng.uniform(1, 60, size=(1000, 2, 2))
    a = np.concatenate([xy[:, 0], xy[:, 0] + wh[:, 0]], axis=1)
    t = np.concatenate([xy[:, 1], xy[:, 1] + wh[:, 1]], axis=1)
    back = geo.decode_deltas(a, geo.encode_deltas(a, t))
    assert np.max(np.abs(back - t)) < 1e-6


@given(boxes(min_size=1.0), boxes(min_size=1.0))
def test_roundtrip_property(a, t):
    d = geo.encode_deltas(np.array(a), np.array(t))
    assume(np.all(d[2:] < geo.MAX_LOG_SCALE))
    back = geo.decode_deltas(np.array(a), geo.encode_deltas(np.array(a), np.array(t)))
    np.testing.assert_allclose(back, t, atol=1e-6)


# ---------------------------------------------------------------- nms

def brute_force_nms(boxes_, scores, thr):
    """Quadratic reference: walk by score, keep if below threshold against all kept."""
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    kept = []
    for i in order:
        if all(geo.iou(boxes_[i], boxes_[j]) < thr for j in kept):
            kept.append(i)
    return kept


def test_nms_single_and_duplicate():
    assert geo.nms(np.array([[0, 0, 5, 5]]), np.array([0.3]), 0.5).tolist() == [0]
    b = np.array([[0, 0, 5, 5], [0, 0, 5, 5]], dtype=float)
    assert geo.nms(b, np.array([0.9, 0.8]), 0.5).tolist() == [0]


def test_nms_ties_prefer_lower_index():
    b = np.array([[0, 0, 5, 5], [0, 0, 5, 5]], dtype=float)
    assert geo.nms(b, np.array([0.5, 0.5]), 0.5).tolist() == [0]


@pytest.mark.parametrize("seed", range(20))
def test_nms_matches_brute_force_on_200_boxes(seed):
    rng = np.random.default_rng(seed)
    xy = rng.uniform(0, 100, size=(200, 2))
    wh = rng.uniform(5, 40, size=(200, 2))
    b = np.concatenate([xy, xy + wh], axis=1)
    s = rng.random(200)
    if seed % 4 == 0:
        s = np.round(s, 1)  # force ties
    thr = float(rng.uniform(0.2, 0.8))
    kept = geo.nms(b, s, thr).tolist()
    assert kept == brute_force_nms(b, s, thr)
    ious = geo.iou_matrix(b[kept], b[kept])
    np.fill_diagonal(ious, 0)
    assert np.all(ious < thr)


# ---------------------------------------------------------------- anchors

def test_single_anchor_is_centred():
    a = geo.make_anchors(1, 1, 16, [16.0], [1.0])
    np.testing.assert_allclose(a, [[0, 0, 16, 16]])


def test_anchor_count():
    assert len(geo.make_anchors(4, 4, 16, [12.0, 20.0], [1.0])) == 32
    assert len(geo.make_anchors(3, 5, 16, [12.0, 18.0, 26.0], [2.0, 0.5])) == 3 * 5 * 6


def test_anchor_ratio_is_height_over_width():
    a = geo.make_anchors(1, 1, 16, [16.0], [2.0])[0]
    assert (a[3] - a[1]) / (a[2] - a[0]) == pytest.approx(2.0)
    assert (a[3] - a[1]) * (a[2] - a[0]) == pytest.approx(256.0)


@given(st.integers(1, 6), st.integers(1, 6), st.lists(st.floats(4, 64), min_size=1, max_size=3),
       st.lists(st.floats(0.25, 4), min_size=1, max_size=2))
def test_same_shape_anchors_are_translations(h, w, scales, ratios):
    a = geo.make_anchors(h, w, 16, scales, ratios).reshape(h * w, len(scales) * len(ratios), 4)
    sizes = a[..., 2:] - a[..., :2]
    np.testing.assert_allclose(sizes, np.broadcast_to(sizes[:1], sizes.shape), atol=1e-9)
    centres = 0.5 * (a[..., :2] + a[..., 2:])
    # every shape sits on the same cell centre grid
    np.testing.assert_allclose(centres, np.broadcast_to(centres[:, :1], centres.shape), atol=1e-9)
    off = (centres - 8.0) / 16.0
    np.testing.assert_allclose(off, np.round(off), atol=1e-9)


def test_make_anchors_rejects_empty_grid():
    with pytest.raises(ValueError):
        geo.make_anchors(0, 3, 16, [8.0], [1.0])


def test_hflip_is_involution_and_reflects():
    b = np.array([[3.0, 1.0, 10.0, 7.0]])
    f = geo.hflip_boxes(b, 64)
    np.testing.assert_array_equal(f, [[54.0, 1.0, 61.0, 7.0]])
    np.testing.assert_array_equal(geo.hflip_boxes(f, 64), b)


def test_clip_boxes_to_image():
    out = geo.clip_boxes(np.array([[-5.0, -1, 70, 30]]), 64, 64)
    np.testing.assert_array_equal(out, [[0, 0, 64, 30]])
