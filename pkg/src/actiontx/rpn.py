"""Action-agnostic person proposals from the keyframe features."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import geometry as geo
from . import tensor as tx
from .params import ModelParams
from .tensor import Tensor


@dataclass
class ProposalSet:
    boxes: np.ndarray    # (R, 4)
    scores: np.ndarray   # (R,) objectness probability, non-increasing
    anchors: np.ndarray  # (R,) source anchor indices

    def __len__(self) -> int:
        return len(self.boxes)


def init_rpn(params: ModelParams, in_channels: int, hidden: int, num_anchors: int) -> None:
    params.add_conv3d("rpn.conv", (1, 3, 3), in_channels, hidden)
    params.add_linear("rpn.cls", hidden, num_anchors)
    params.add_linear("rpn.reg", hidden, 4 * num_anchors, gain=0.1)


def rpn_forward(params: ModelParams, center: Tensor) -> tuple[Tensor, Tensor]:
    """(N, H', W', F) keyframe features -> logits (N, H'W'A), deltas (N, H'W'A, 4).

    Anchor ordering matches :func:`geometry.make_anchors`: cell row-major, then anchor.
    """
    n, h, w, f = center.shape
    x = tx.reshape(center, (n, 1, h, w, f))
    x = tx.relu(tx.conv3d(x, params["rpn.conv.w"], params["rpn.conv.b"], padding=(0, 1, 1)))
    x = tx.reshape(x, (n, h, w, x.shape[-1]))
    logits = tx.conv1x1(x, params["rpn.cls.w"], params["rpn.cls.b"])
    deltas = tx.conv1x1(x, params["rpn.reg.w"], params["rpn.reg.b"])
    a = logits.shape[-1]
    return tx.reshape(logits, (n, h * w * a)), tx.reshape(deltas, (n, h * w * a, 4))


def select_proposals(logits: np.ndarray, deltas: np.ndarray, anchors: np.ndarray, r: int,
                     image_h: float, image_w: float, nms_threshold: float = 0.7,
                     min_size: float = 1.0) -> ProposalSet:
    """Decode, clip, drop degenerate boxes, NMS, keep the top ``r`` by objectness."""
    if r < 1:
        raise ValueError("R must be >= 1")
    logits = np.asarray(logits, dtype=np.float64).reshape(-1)
    boxes = geo.clip_boxes(geo.decode_deltas(anchors, np.asarray(deltas).reshape(-1, 4)), image_h, image_w)
    wh = boxes[:, 2:] - boxes[:, :2]
    valid = np.flatnonzero((wh[:, 0] >= min_size) & (wh[:, 1] >= min_size))
    scores = 0.5 * (1.0 + np.tanh(0.5 * logits[valid]))
    keep = geo.nms(boxes[valid], scores, nms_threshold)[:r]
    idx = valid[keep]
    return ProposalSet(boxes[idx], scores[keep], idx)


def label_anchors(anchors: np.ndarray, gt_boxes: np.ndarray, pos_iou: float = 0.7,
                  neg_iou: float = 0.3) -> tuple[np.ndarray, np.ndarray]:
    """Anchor labels (1 pos, 0 neg, -1 ignore) and matched GT index.

    Besides the IoU thresholds, each GT's best anchor is positive so that
    every person gets at least one.
    """
    labels = np.full(len(anchors), -1, dtype=np.int64)
    if len(gt_boxes) == 0:
        labels[:] = 0
        return labels, np.zeros(len(anchors), dtype=np.int64)
    ious = geo.iou_matrix(anchors, gt_boxes)
    best_gt = ious.argmax(axis=1)
    best = ious.max(axis=1)
    labels[best < neg_iou] = 0
    labels[best >= pos_iou] = 1
    for g in range(len(gt_boxes)):
        col = ious[:, g]
        if col.max() > 0:
            top = np.flatnonzero(col == col.max())
            labels[top] = 1
            best_gt[top] = g
    return labels, best_gt
