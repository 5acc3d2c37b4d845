import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from actiontx import evaluation as ev

BOX = (0.0, 0.0, 10.0, 10.0)
FAR = (50.0, 50.0, 60.0, 60.0)


def _gt(clip, pid, box, labels):
    return (clip, pid, box, labels)


def test_perfect_detection_ap_is_one():
    gts = [_gt("a", 0, BOX, [0]), _gt("b", 0, FAR, [0])]
    dets = [("a", 0, 0.9, *BOX), ("b", 0, 0.8, *FAR)]
    ap, n_gt, n_tp = ev.frame_ap(dets, gts, 0)
    assert (ap, n_gt, n_tp) == (1.0, 2, 2)


def test_half_recall_fixture():
    gts = [_gt("a", 0, BOX, [0]), _gt("b", 0, FAR, [0])]
    dets = [("a", 0, 0.9, *BOX)]
    assert ev.frame_ap(dets, gts, 0)[0] == pytest.approx(0.5)


def test_fp_first_then_tp():
    gts = [_gt("a", 0, BOX, [0])]
    dets = [("a", 0, 0.9, *FAR), ("a", 0, 0.8, *BOX)]
    assert ev.frame_ap(dets, gts, 0)[0] == pytest.approx(0.5)


def test_duplicate_detection_is_false_positive():
    gts = [_gt("a", 0, BOX, [0])]
    dets = [("a", 0, 0.9, *BOX), ("a", 0, 0.8, *BOX)]
    tp = ev.match_detections([(d[0], d[2], d[3:]) for d in dets], {"a": np.array([BOX])}, 0.5)
    assert tp.tolist() == [True, False]


def test_matches_highest_iou_unmatched_gt():
    g = np.array([[0, 0, 10, 10], [2, 0, 12, 10]], float)
    dets = [("a", 0.9, (2.0, 0.0, 12.0, 10.0)), ("a", 0.8, (1.0, 0.0, 11.0, 10.0))]
    assert ev.match_detections(dets, {"a": g}, 0.5).tolist() == [True, True]


def test_detection_in_other_clip_never_matches():
    gts = [_gt("a", 0, BOX, [0])]
    assert ev.frame_ap([("b", 0, 0.9, *BOX)], gts, 0)[0] == 0.0


def test_class_without_gt_is_nan_and_excluded():
    gts = [_gt("a", 0, BOX, [0])]
    rep = ev.evaluate([("a", 0, 0.9, *BOX), ("a", 1, 0.9, *BOX)], gts, 2)
    assert math.isnan(rep.per_class_ap[1])
    assert rep.map == 1.0


def test_single_class_map_equals_ap():
    gts = [_gt("a", 0, BOX, [0]), _gt("b", 0, FAR, [0])]
    dets = [("a", 0, 0.4, *BOX), ("b", 0, 0.9, *BOX)]
    rep = ev.evaluate(dets, gts, 1)
    assert rep.map == rep.per_class_ap[0] == ev.frame_ap(dets, gts, 0)[0]


def brute_force_ap(tp, n_gt):
    """Quadratic: precision envelope evaluated at every recall step."""
    tp = list(tp)
    pr = []
    for k in range(1, len(tp) + 1):
        hits = sum(tp[:k])
        pr.append((hits / n_gt, hits / k))
    ap, prev_r = 0.0, 0.0
    for k, (r, _) in enumerate(pr):
        if r > prev_r:
            ap += (r - prev_r) * max(p for rr, p in pr[k:] if rr >= r)
            prev_r = r
    return ap


@settings(max_examples=300)
@given(st.lists(st.booleans(), max_size=40), st.integers(0, 10))
def test_ap_matches_brute_force(tp, extra_gt):
    tp = np.array(tp, dtype=bool)
    n_gt = int(tp.sum()) + extra_gt
    if n_gt == 0:
        assert math.isnan(ev.average_precision(tp, 0))
        return
    assert ev.average_precision(tp, n_gt) == pytest.approx(brute_force_ap(tp, n_gt), abs=1e-9)


def _random_case(seed, n_clips=6, n_det=30):
    rng = np.random.default_rng(seed)
    gts, dets = [], []
    for c in range(n_clips):
        for p in range(rng.integers(1, 4)):
            xy = rng.uniform(0, 40, 2)
            box = (*xy, *(xy + rng.uniform(8, 20, 2)))
            gts.append((f"c{c}", p, tuple(map(float, box)), [int(rng.integers(0, 2))]))
    for _ in range(n_det):
        g = gts[rng.integers(len(gts))]
        jitter = rng.normal(0, 2.5, 4)
        dets.append((g[0], int(rng.integers(0, 2)), float(rng.random()), *(np.array(g[2]) + jitter)))
    return dets, gts


@pytest.mark.parametrize("seed", range(10))
def test_monotone_score_transform_invariance(seed):
    dets, gts = _random_case(seed)
    mapped = [(d[0], d[1], math.exp(3 * d[2]) - 7, *d[3:]) for d in dets]
    a = ev.evaluate(dets, gts, 2)
    b = ev.evaluate(mapped, gts, 2)
    assert a.per_class_ap == b.per_class_ap


@pytest.mark.parametrize("seed", range(10))
def test_low_score_false_positive_never_helps(seed):
    dets, gts = _random_case(seed)
    base = ev.frame_ap(dets, gts, 0)[0]
    worse = ev.frame_ap(dets + [("c0", 0, -1.0, 200.0, 200.0, 210.0, 210.0)], gts, 0)[0]
    assert worse <= base


def test_strict_threshold_not_above_loose():
    dets, gts = _random_case(3)
    rep = ev.evaluate(dets, gts, 2)
    for c in range(2):
        assert rep.per_class_ap_strict[c] <= rep.per_class_ap[c]


# ---------------------------------------------------------------- bins

@given(st.lists(st.floats(1, 1e4), min_size=1, max_size=60), st.integers(1, 6))
def test_bins_partition_and_nonempty(values, n_bins):
    edges = ev.bin_edges(np.array(values), n_bins)
    idx = ev.assign_bins(np.array(values), edges)
    assert len(edges) + 1 <= n_bins
    assert np.all(np.diff(edges) > 0)
    assert set(idx.tolist()) == set(range(len(edges) + 1))


def test_equal_areas_give_single_bin():
    gts = [_gt(f"c{i}", 0, BOX, [0]) for i in range(5)]
    bins = ev.binned_report([], gts, 1, "area", 3)
    assert len(bins) == 1
    assert bins[0].n_gt == 5
    assert (bins[0].lo, bins[0].hi) == (-math.inf, math.inf)


def test_count_mode_with_one_gt_per_clip_is_single_bin():
    gts = [_gt(f"c{i}", 0, (0.0, 0.0, 5.0 + i, 10.0), [0]) for i in range(6)]
    assert len(ev.binned_report([], gts, 1, "count", 3)) == 1


def test_count_bins_split_crowded_clips():
    gts = [_gt("a", 0, BOX, [0])] + [_gt("b", p, FAR, [0]) for p in range(3)]
    dets = [("a", 0, 0.9, *BOX), ("b", 0, 0.9, *FAR)]
    bins = ev.binned_report(dets, gts, 1, "count", 2)
    assert [b.n_gt for b in bins] == [1, 3]
    assert bins[0].map == 1.0
    assert bins[1].map == pytest.approx(1 / 3)


def test_bin_gt_totals_add_up():
    dets, gts = _random_case(1)
    rep = ev.evaluate(dets, gts, 2, n_bins=3)
    assert sum(b.n_gt for b in rep.area_bins) == len(gts)
    assert sum(b.n_gt for b in rep.count_bins) == len(gts)


def test_bad_bin_mode():
    with pytest.raises(ValueError):
        ev.binned_report([], [], 1, "volume")


# ---------------------------------------------------------------- files

def test_detection_csv_roundtrip(tmp_path):
    dets, _ = _random_case(2)
    path = tmp_path / "d.csv"
    ev.write_detections(path, dets)
    back = ev.read_detections(path)
    assert [(d[0], d[1], *map(float, d[2:])) for d in dets] == back


def test_report_json_writes_nan_as_string():
    import json

    rep = ev.evaluate([], [_gt("a", 0, BOX, [0])], 2)
    data = json.loads(rep.to_json())
    assert data["per_class_ap"]["1"] == "nan"


def test_gt_rows_from_samples_action_agnostic():
    from actiontx.synthdata import SceneSpec, generate_samples

    s = generate_samples(SceneSpec(seed=1), 2)
    rows = ev.gt_rows_from_samples(s, action_agnostic=True)
    assert len(rows) == sum(len(x.boxes) for x in s)
    assert all(r[3] == [0] for r in rows)
