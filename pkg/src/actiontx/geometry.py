"""Boxes, IoU, anchors, delta coding and NMS.

Boxes are ``(x1, y1, x2, y2)`` in keyframe pixel coordinates; width is
``x2 - x1``. Vectorised helpers take ``(N, 4)`` arrays.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

# exp() of larger deltas would blow a box past any sensible image size
MAX_LOG_SCALE = math.log(1000.0 / 16.0)


class Box(NamedTuple):
    x1: float
    y1: float
    x2: float
    y2: float

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return max(self.width, 0.0) * max(self.height, 0.0)

    def is_valid(self) -> bool:
        return all(math.isfinite(v) for v in self) and self.x1 <= self.x2 and self.y1 <= self.y2


@dataclass
class Detection:
    box: Box
    scores: np.ndarray
    objectness: float = 1.0

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)


def iou(a: Sequence[float], b: Sequence[float]) -> float:
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    inter = max(iw, 0.0) * max(ih, 0.0)
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    if union <= 0:
        return 0.0
    return float(inter / union)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(union > 0, inter / np.where(union > 0, union, 1), 0.0)
    return out


def box_areas(boxes: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    return np.clip(boxes[:, 2] - boxes[:, 0], 0, None) * np.clip(boxes[:, 3] - boxes[:, 1], 0, None)


def encode_deltas(anchors: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """(dcx/w, dcy/h, log(w'/w), log(h'/h)) of targets relative to anchors."""
    anchors = np.asarray(anchors, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    single = anchors.ndim == 1
    anchors, targets = anchors.reshape(-1, 4), targets.reshape(-1, 4)
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    if np.any(aw <= 0) or np.any(ah <= 0):
        raise ValueError("anchor boxes must have positive width and height")
    tw = targets[:, 2] - targets[:, 0]
    th = targets[:, 3] - targets[:, 1]
    out = np.stack([
        ((targets[:, 0] + targets[:, 2]) - (anchors[:, 0] + anchors[:, 2])) / (2 * aw),
        ((targets[:, 1] + targets[:, 3]) - (anchors[:, 1] + anchors[:, 3])) / (2 * ah),
        np.log(tw / aw),
        np.log(th / ah),
    ], axis=1)
    return out[0] if single else out


def decode_deltas(anchors: np.ndarray, deltas: np.ndarray) -> np.ndarray:
    anchors = np.asarray(anchors, dtype=np.float64)
    deltas = np.asarray(deltas, dtype=np.float64)
    single = anchors.ndim == 1
    anchors, deltas = anchors.reshape(-1, 4), deltas.reshape(-1, 4)
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    if np.any(aw <= 0) or np.any(ah <= 0):
        raise ValueError("anchor boxes must have positive width and height")
    cx = 0.5 * (anchors[:, 0] + anchors[:, 2]) + deltas[:, 0] * aw
    cy = 0.5 * (anchors[:, 1] + anchors[:, 3]) + deltas[:, 1] * ah
    w = aw * np.exp(np.minimum(deltas[:, 2], MAX_LOG_SCALE))
    h = ah * np.exp(np.minimum(deltas[:, 3], MAX_LOG_SCALE))
    out = np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=1)
    return out[0] if single else out


def clip_boxes(boxes: np.ndarray, height: float, width: float) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64).copy()
    boxes[..., 0::2] = np.clip(boxes[..., 0::2], 0, width)
    boxes[..., 1::2] = np.clip(boxes[..., 1::2], 0, height)
    return boxes


def nms(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float) -> np.ndarray:
    """Greedy NMS; returns kept indices in descending-score order.

    A box is suppressed when its IoU with an already kept box is >= threshold.
    Equal scores are visited in index order.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    order = np.argsort(-scores, kind="stable")
    if len(order) == 0:
        return np.zeros(0, dtype=np.int64)
    ious = iou_matrix(boxes, boxes)
    suppressed = np.zeros(len(boxes), dtype=bool)
    keep = []
    for i in order:
        if suppressed[i]:
            continue
        keep.append(i)
        suppressed |= ious[i] >= iou_threshold
    return np.asarray(keep, dtype=np.int64)


def make_anchors(feature_h: int, feature_w: int, stride: float,
                 scales: Sequence[float], aspect_ratios: Sequence[float]) -> np.ndarray:
    """Anchors centred on each feature cell, row-major, then scale, then ratio.

    ``scales`` are square-root areas in pixels; a ratio is height / width.
    """
    if feature_h <= 0 or feature_w <= 0:
        raise ValueError("feature dims must be positive")
    shapes = []
    for s in scales:
        for r in aspect_ratios:
            w = s / math.sqrt(r)
            h = s * math.sqrt(r)
            shapes.append((w, h))
    shapes = np.asarray(shapes)
    ys = (np.arange(feature_h) + 0.5) * stride
    xs = (np.arange(feature_w) + 0.5) * stride
    cy, cx = np.meshgrid(ys, xs, indexing="ij")
    cx = cx.reshape(-1, 1)
    cy = cy.reshape(-1, 1)
    out = np.stack([cx - shapes[None, :, 0] / 2, cy - shapes[None, :, 1] / 2,
                    cx + shapes[None, :, 0] / 2, cy + shapes[None, :, 1] / 2], axis=-1)
    return out.reshape(-1, 4)


def hflip_boxes(boxes: np.ndarray, width: float) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    return np.stack([width - boxes[:, 2], boxes[:, 1], width - boxes[:, 0], boxes[:, 3]], axis=1)
