"""Frame-level AP and the per-bin breakdowns.

Detections are rows ``(clip_id, class_id, score, x1, y1, x2, y2)``.
Ground truth is rows ``(clip_id, person_id, (x1, y1, x2, y2), [labels])``.
Both round-trip through comma-separated text files.
"""
from __future__ import annotations

import csv
import json
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from . import geometry as geo


@dataclass
class BinResult:
    lo: float
    hi: float
    n_gt: int
    map: float
    per_class: dict = field(default_factory=dict)


@dataclass
class EvalReport:
    iou_threshold: float
    per_class_ap: dict
    map: float
    n_gt: int
    matched: int
    unmatched: int
    n_detections: int
    strict_threshold: Optional[float] = None
    per_class_ap_strict: dict = field(default_factory=dict)
    map_strict: Optional[float] = None
    area_bins: list = field(default_factory=list)
    count_bins: list = field(default_factory=list)

    def to_json(self) -> str:
        def clean(v):
            if isinstance(v, float) and math.isnan(v):
                return "nan"
            if isinstance(v, dict):
                return {str(k): clean(x) for k, x in v.items()}
            if isinstance(v, list):
                return [clean(x) for x in v]
            return v
        return json.dumps(clean(asdict(self)), sort_keys=True)

    def class_subset_map(self, classes: Iterable[int], strict: bool = False) -> float:
        src = self.per_class_ap_strict if strict else self.per_class_ap
        vals = [src[c] for c in classes if c in src and not math.isnan(src[c])]
        return float(np.mean(vals)) if vals else float("nan")


# ---------------------------------------------------------------- core

def match_detections(dets: Sequence[tuple], gts: dict, iou_threshold: float) -> np.ndarray:
    """TP flags for detections already sorted by descending score.

    dets: (clip_id, score, box); gts: clip_id -> (G, 4) boxes of this class.
    A detection takes the highest-IoU still-unmatched GT in its clip.
    """
    used = {k: np.zeros(len(v), dtype=bool) for k, v in gts.items()}
    tp = np.zeros(len(dets), dtype=bool)
    for i, (clip, _score, box) in enumerate(dets):
        g = gts.get(clip)
        if g is None or len(g) == 0:
            continue
        ious = geo.iou_matrix(np.asarray(box)[None], g)[0]
        ious[used[clip]] = -1.0
        j = int(np.argmax(ious))
        if ious[j] >= iou_threshold:
            tp[i] = True
            used[clip][j] = True
    return tp


def average_precision(tp: np.ndarray, n_gt: int) -> float:
    """Area under the precision envelope (all-point interpolation)."""
    if n_gt == 0:
        return float("nan")
    if len(tp) == 0:
        return 0.0
    tps = np.cumsum(tp)
    fps = np.cumsum(~tp)
    recall = tps / n_gt
    precision = tps / (tps + fps)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def _sorted_class_dets(detections: Sequence[tuple], cls: int) -> list:
    rows = [(d[0], d[2], d[3:7]) for d in detections if d[1] == cls]
    order = sorted(range(len(rows)), key=lambda i: -rows[i][1])
    return [rows[i] for i in order]


def _class_gts(gt_rows: Sequence[tuple], cls: int) -> dict:
    out: dict = defaultdict(list)
    for clip, _pid, box, labels in gt_rows:
        if cls in labels:
            out[clip].append(box)
    return {k: np.asarray(v, dtype=np.float64).reshape(-1, 4) for k, v in out.items()}


def frame_ap(detections: Sequence[tuple], gt_rows: Sequence[tuple], cls: int,
             iou_threshold: float = 0.5) -> tuple[float, int, int]:
    """(AP, n_gt, n_tp) for one class. AP is NaN when the class has no GT."""
    gts = _class_gts(gt_rows, cls)
    n_gt = sum(len(v) for v in gts.values())
    dets = _sorted_class_dets(detections, cls)
    tp = match_detections(dets, gts, iou_threshold)
    return average_precision(tp, n_gt), n_gt, int(tp.sum())


def _map(per_class: dict) -> float:
    vals = [v for v in per_class.values() if not math.isnan(v)]
    return float(np.mean(vals)) if vals else float("nan")


def evaluate(detections: Sequence[tuple], gt_rows: Sequence[tuple], num_classes: int,
             iou_threshold: float = 0.5, strict_threshold: Optional[float] = 0.75,
             n_bins: int = 0) -> EvalReport:
    """Per-class frame-AP, mAP over classes with GT, optional strict IoU and bins."""
    per, n_gt_total, matched = {}, 0, 0
    for c in range(num_classes):
        ap, n_gt, n_tp = frame_ap(detections, gt_rows, c, iou_threshold)
        per[c] = ap
        n_gt_total += n_gt
        matched += n_tp
    rep = EvalReport(iou_threshold, per, _map(per), n_gt_total, matched, n_gt_total - matched,
                     len(detections))
    if strict_threshold is not None:
        strict = {c: frame_ap(detections, gt_rows, c, strict_threshold)[0] for c in range(num_classes)}
        rep.strict_threshold = strict_threshold
        rep.per_class_ap_strict = strict
        rep.map_strict = _map(strict)
    if n_bins:
        rep.area_bins = binned_report(detections, gt_rows, num_classes, "area", n_bins, iou_threshold)
        rep.count_bins = binned_report(detections, gt_rows, num_classes, "count", n_bins, iou_threshold)
    return rep


# ---------------------------------------------------------------- bins

def bin_edges(values: np.ndarray, n_bins: int) -> np.ndarray:
    """Interior edges splitting sorted values into similar-sized groups.

    Bin b holds values in [edge[b-1], edge[b]); outer bins are open-ended, so
    every value lands in exactly one bin and no bin is empty.
    """
    v = np.sort(np.asarray(values, dtype=np.float64))
    n_bins = max(1, min(n_bins, len(v)))
    if len(v) == 0 or n_bins == 1:
        return np.zeros(0)
    pos = [int(round(i * len(v) / n_bins)) for i in range(1, n_bins)]
    edges = np.unique(v[pos])
    return edges[edges > v[0]]


def assign_bins(values: np.ndarray, edges: np.ndarray) -> np.ndarray:
    return np.searchsorted(edges, np.asarray(values, dtype=np.float64), side="right")


def _gt_values(gt_rows, mode):
    if mode == "area":
        return np.array([geo.box_areas(np.asarray(r[2])[None])[0] for r in gt_rows])
    counts = defaultdict(int)
    for r in gt_rows:
        counts[r[0]] += 1
    return np.array([counts[r[0]] for r in gt_rows], dtype=np.float64), counts


def binned_report(detections: Sequence[tuple], gt_rows: Sequence[tuple], num_classes: int,
                  mode: str = "area", n_bins: int = 3, iou_threshold: float = 0.5) -> list[BinResult]:
    """mAP restricted to GT and predictions falling in each bin."""
    if mode not in ("area", "count"):
        raise ValueError("mode must be 'area' or 'count'")
    gt_rows = list(gt_rows)
    if not gt_rows:
        return []
    if mode == "area":
        gvals = _gt_values(gt_rows, mode)
        dvals = geo.box_areas(np.array([d[3:7] for d in detections]).reshape(-1, 4))
    else:
        gvals, counts = _gt_values(gt_rows, mode)
        dvals = np.array([counts.get(d[0], 0) for d in detections], dtype=np.float64)
    edges = bin_edges(gvals, n_bins)
    gb = assign_bins(gvals, edges)
    db = assign_bins(dvals, edges)
    bounds = np.concatenate([[-np.inf], edges, [np.inf]])
    out = []
    for b in range(len(edges) + 1):
        g_sub = [r for r, k in zip(gt_rows, gb) if k == b]
        d_sub = [d for d, k in zip(detections, db) if k == b]
        per = {c: frame_ap(d_sub, g_sub, c, iou_threshold)[0] for c in range(num_classes)}
        out.append(BinResult(float(bounds[b]), float(bounds[b + 1]), len(g_sub), _map(per), per))
    return out


# ---------------------------------------------------------------- interchange files

def write_detections(path, rows: Iterable[tuple]) -> None:
    with open(path, "w", newline="") as f:
        wr = csv.writer(f, lineterminator="\n")
        for clip, cls, score, x1, y1, x2, y2 in rows:
            wr.writerow([clip, int(cls), repr(float(score)), repr(float(x1)), repr(float(y1)),
                         repr(float(x2)), repr(float(y2))])


def read_detections(path) -> list[tuple]:
    out = []
    with open(path, newline="") as f:
        for row in csv.reader(f):
            if row:
                out.append((row[0], int(row[1]), *map(float, row[2:7])))
    return out


def gt_rows_from_samples(samples, action_agnostic: bool = False) -> list[tuple]:
    rows = []
    for s in samples:
        for pid, (box, lab) in enumerate(zip(s.boxes, s.labels)):
            labels = [0] if action_agnostic else np.flatnonzero(lab).tolist()
            rows.append((s.clip_id, pid, tuple(map(float, box)), labels))
    return rows


def gt_rows_from_annotations(ann: dict) -> list[tuple]:
    rows = []
    for clip, items in ann.items():
        for pid, box, labels in items:
            rows.append((clip, pid, tuple(box), list(labels)))
    return rows
