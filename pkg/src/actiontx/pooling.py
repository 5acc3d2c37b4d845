"""RoIPool on the keyframe and ST-RoIPool over the clip tube.

Pooling is bilinear crop-and-resize to 14x14 followed by a 2x2 max pool, so
the output is always 7x7 per box. The crop is expressed as a constant
interpolation matrix, which lets one batched op serve every box and frame.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np

from . import tensor as tx
from .tensor import ShapeError, Tensor

CROP_SIZE = 14
POOLED_SIZE = 7
FEATURE_STRIDE = 16


def _axis_weights(lo: float, hi: float, n_cells: int, n_out: int) -> np.ndarray:
    """(n_out, n_cells) linear-interpolation weights along one axis.

    ``lo``/``hi`` are in feature-cell units where cell j spans [j, j+1).
    Samples sit at the centres of n_out equal bins; positions are clamped to
    the outermost cell centres.
    """
    pos = lo + (np.arange(n_out) + 0.5) * (hi - lo) / n_out - 0.5
    pos = np.clip(pos, 0.0, n_cells - 1)
    i0 = np.floor(pos).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_cells - 1)
    frac = pos - i0
    w = np.zeros((n_out, n_cells))
    np.add.at(w, (np.arange(n_out), i0), 1.0 - frac)
    np.add.at(w, (np.arange(n_out), i1), frac)
    return w


def roi_weights(boxes: np.ndarray, feat_h: int, feat_w: int, stride: float = FEATURE_STRIDE,
                crop: int = CROP_SIZE) -> np.ndarray:
    """(R, crop*crop, feat_h*feat_w) bilinear weights for pixel-space boxes."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    out = np.empty((len(boxes), crop * crop, feat_h * feat_w))
    for r, (x1, y1, x2, y2) in enumerate(boxes):
        x1, x2 = np.clip([x1, x2], 0, feat_w * stride) / stride
        y1, y2 = np.clip([y1, y2], 0, feat_h * stride) / stride
        if not (x2 > x1 and y2 > y1):
            raise ValueError(f"box {boxes[r].tolist()} has zero area on the feature map")
        wy = _axis_weights(y1, y2, feat_h, crop)
        wx = _axis_weights(x1, x2, feat_w, crop)
        out[r] = np.kron(wy, wx)
    return out


def roipool_batch(features: Tensor, boxes: np.ndarray, stride: float = FEATURE_STRIDE) -> Tensor:
    """(H', W', F) features, R boxes -> (R, 7, 7, F)."""
    if features.ndim != 3:
        raise ShapeError("roipool", features.shape, ("H'", "W'", "F"))
    h, w, f = features.shape
    wts = roi_weights(boxes, h, w, stride)
    crops = tx.bilinear_sample(tx.reshape(features, (1, h * w, f)), wts)
    crops = tx.reshape(crops, (len(wts), CROP_SIZE, CROP_SIZE, f))
    return tx.maxpool2d(crops, 2)


def roipool(features: Tensor, box: Sequence[float], stride: float = FEATURE_STRIDE) -> Tensor:
    """Single box -> (7, 7, F)."""
    return roipool_batch(features, np.asarray(box, dtype=np.float64)[None], stride)[0]


def st_roipool_batch(features: Tensor, boxes: np.ndarray, stride: float = FEATURE_STRIDE) -> Tensor:
    """(T', H', W', F) features, R boxes -> (R, T', 7, 7, F); the box is replicated over time."""
    if features.ndim != 4:
        raise ShapeError("st_roipool", features.shape, ("T'", "H'", "W'", "F"))
    t, h, w, f = features.shape
    wts = roi_weights(boxes, h, w, stride)
    crops = tx.bilinear_sample(tx.reshape(features, (t, h * w, f)), wts)
    crops = tx.reshape(crops, (len(wts), t, CROP_SIZE, CROP_SIZE, f))
    return tx.maxpool2d(crops, 2)


def st_roipool(features: Tensor, box: Sequence[float], stride: float = FEATURE_STRIDE) -> Tensor:
    return st_roipool_batch(features, np.asarray(box, dtype=np.float64)[None], stride)[0]
