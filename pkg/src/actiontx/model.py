"""Full detector: trunk, location embedding, RPN and the classification heads."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import geometry as geo
from . import tensor as tx
from .backbone import (LocationEmbeddingConfig, SPATIAL_FACTOR, append_embedding, init_location_embedding,
                       init_trunk, location_embedding, normalize_clip, slice_center, trunk_forward)
from .i3d_head import i3d_head_forward, init_i3d_head
from .params import ModelParams
from .pooling import FEATURE_STRIDE, roipool_batch, st_roipool_batch
from .rpn import ProposalSet, init_rpn, rpn_forward, select_proposals
from .tensor import Tensor
from .tx_head import AttentionTrace, TxConfig, init_tx_head, tx_head_forward

HEAD_MODES = ("tx", "i3d", "tx+i3d")


@dataclass(frozen=True)
class ModelConfig:
    num_classes: int = 6
    trunk_channels: tuple = (16, 16, 32, 32)
    emb_hidden: int = 8
    emb_out: int = 8
    anchor_scales: tuple = (12.0, 18.0, 26.0)
    anchor_ratios: tuple = (2.0,)
    rpn_hidden: int = 32
    rpn_nms: float = 0.7
    proposals: int = 300
    head: str = "tx"
    qpr: str = "highres"
    d_model: int = 128
    heads: int = 2
    layers: int = 3
    dropout: float = 0.3
    ffn_hidden: int = 256
    qpr_channels: int = 32
    i3d_channels: int = 32
    class_agnostic_reg: bool = True
    det_nms: float = 0.5

    def __post_init__(self):
        if self.head not in HEAD_MODES:
            raise ValueError(f"head must be one of {HEAD_MODES}, got {self.head!r}")
        if self.proposals < 1:
            raise ValueError("proposals must be >= 1")
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        self.tx_config()

    def tx_config(self) -> TxConfig:
        return TxConfig(d_model=self.d_model, value_dim=self.d_model, heads=self.heads, layers=self.layers,
                        dropout=self.dropout, ffn_hidden=self.ffn_hidden, qpr=self.qpr,
                        qpr_channels=self.qpr_channels)

    def emb_config(self) -> LocationEmbeddingConfig:
        return LocationEmbeddingConfig(self.emb_hidden, self.emb_hidden, self.emb_out)

    @property
    def num_anchors(self) -> int:
        return len(self.anchor_scales) * len(self.anchor_ratios)

    @property
    def uses_tx(self) -> bool:
        return self.head in ("tx", "tx+i3d")

    @property
    def uses_i3d(self) -> bool:
        return self.head in ("i3d", "tx+i3d")


@dataclass
class HeadOutputs:
    """Raw per-proposal outputs of whichever heads are active."""

    tx_logits: Optional[Tensor] = None
    tx_deltas: Optional[Tensor] = None
    i3d_logits: Optional[Tensor] = None
    i3d_deltas: Optional[Tensor] = None
    trace: Optional[AttentionTrace] = None

    def routed(self, mode: str) -> tuple[Tensor, Tensor]:
        if mode == "tx":
            return self.tx_logits, self.tx_deltas
        if mode == "i3d":
            return self.i3d_logits, self.i3d_deltas
        return self.tx_logits, self.i3d_deltas

    def loss_pairs(self) -> list[tuple[Tensor, Tensor]]:
        """(logits, deltas) of every active head; all are trained."""
        pairs = []
        if self.tx_logits is not None:
            pairs.append((self.tx_logits, self.tx_deltas))
        if self.i3d_logits is not None:
            pairs.append((self.i3d_logits, self.i3d_deltas))
        return pairs


@dataclass
class DetectionSet:
    """Per-proposal detections for one clip.

    boxes: (R, C, 4) refined boxes (identical across C with class-agnostic
    regression); scores: (R, C) sigmoid action scores; background: (R,).
    """

    proposals: np.ndarray
    boxes: np.ndarray
    scores: np.ndarray
    background: np.ndarray
    objectness: np.ndarray
    trace: Optional[AttentionTrace] = None

    def detections(self) -> list[geo.Detection]:
        return [geo.Detection(geo.Box(*self.boxes[r, 0]), self.scores[r], float(self.objectness[r]))
                for r in range(len(self.proposals))]

    def records(self, clip_id: str, nms_threshold: Optional[float] = None,
                background_threshold: Optional[float] = None) -> list[tuple]:
        """(clip_id, class_id, score, x1, y1, x2, y2) rows, optional per-class NMS."""
        rows = []
        keep_bg = np.ones(len(self.proposals), dtype=bool)
        if background_threshold is not None:
            keep_bg = self.background <= background_threshold
        for c in range(self.scores.shape[1]):
            idx = np.flatnonzero(keep_bg)
            if nms_threshold is not None and len(idx):
                idx = idx[geo.nms(self.boxes[idx, c], self.scores[idx, c], nms_threshold)]
            for r in idx:
                rows.append((clip_id, c, float(self.scores[r, c]), *map(float, self.boxes[r, c])))
        return rows


class Detector:
    def __init__(self, cfg: ModelConfig, num_classes: Optional[int] = None, seed: int = 0, dtype=np.float32):
        self.cfg = cfg
        self.num_classes = cfg.num_classes if num_classes is None else num_classes
        self.tx_cfg = cfg.tx_config()
        self.params = ModelParams(seed, dtype)
        p = self.params
        init_trunk(p, cfg.trunk_channels)
        emb = cfg.emb_config()
        init_location_embedding(p, emb)
        self.trunk_channels = cfg.trunk_channels[-1]
        self.memory_channels = self.trunk_channels + emb.channels
        init_rpn(p, self.trunk_channels, cfg.rpn_hidden, cfg.num_anchors)
        reg_out = 4 if cfg.class_agnostic_reg else 4 * self.num_classes
        if cfg.uses_tx:
            init_tx_head(p, self.memory_channels, self.num_classes + 1, reg_out, self.tx_cfg)
        if cfg.uses_i3d:
            init_i3d_head(p, self.memory_channels, self.num_classes + 1, reg_out, cfg.i3d_channels)

    @property
    def dtype(self):
        return self.params.dtype

    def anchors(self, feat_h: int, feat_w: int) -> np.ndarray:
        return geo.make_anchors(feat_h, feat_w, FEATURE_STRIDE, self.cfg.anchor_scales, self.cfg.anchor_ratios)

    def backbone(self, clips: np.ndarray) -> tuple[Tensor, Tensor]:
        """uint8 (N, T, H, W, 3) -> trunk features and memory (features + embedding)."""
        x = Tensor(normalize_clip(clips, self.dtype))
        feats = trunk_forward(self.params, x)
        _, t, h, w, _ = feats.shape
        memory = append_embedding(feats, location_embedding(self.params, t, h, w))
        return feats, memory

    def rpn(self, feats: Tensor) -> tuple[Tensor, Tensor]:
        return rpn_forward(self.params, slice_center(feats))

    def heads(self, memory: Tensor, boxes: np.ndarray, training: bool = False,
              key: Optional[Sequence] = None) -> HeadOutputs:
        """Run active heads for R boxes on one clip's (T', H', W', F) memory."""
        out = HeadOutputs()
        if self.cfg.uses_tx:
            roi = roipool_batch(slice_center(memory), boxes)
            out.tx_logits, out.tx_deltas, out.trace = tx_head_forward(
                self.params, roi, memory, self.tx_cfg, training, key)
        if self.cfg.uses_i3d:
            tube = st_roipool_batch(memory, boxes)
            out.i3d_logits, out.i3d_deltas = i3d_head_forward(self.params, tube)
        return out

    def refine(self, proposals: np.ndarray, deltas: np.ndarray, image_h: int, image_w: int) -> np.ndarray:
        """(R, 4) proposals + head deltas -> (R, C, 4) boxes."""
        r = len(proposals)
        c = self.num_classes
        d = np.asarray(deltas, dtype=np.float64).reshape(r, -1, 4)
        out = np.empty((r, d.shape[1], 4))
        for j in range(d.shape[1]):
            out[:, j] = geo.clip_boxes(geo.decode_deltas(proposals, d[:, j]), image_h, image_w)
        if d.shape[1] == 1:
            out = np.repeat(out, c, axis=1)
        return out

    def propose(self, rpn_logits: np.ndarray, rpn_deltas: np.ndarray, feat_hw: tuple, image_hw: tuple,
                r: Optional[int] = None) -> ProposalSet:
        return select_proposals(rpn_logits, rpn_deltas, self.anchors(*feat_hw), r or self.cfg.proposals,
                                image_hw[0], image_hw[1], self.cfg.rpn_nms)

    def detect(self, clips: np.ndarray, gt_boxes: Optional[Sequence[np.ndarray]] = None,
               r: Optional[int] = None) -> list[DetectionSet]:
        """Inference on uint8 clips. With ``gt_boxes`` the RPN is bypassed."""
        clips = np.asarray(clips)
        if clips.ndim == 4:
            clips = clips[None]
        n, _, ih, iw, _ = clips.shape
        results = []
        with tx.no_grad():
            feats, memory = self.backbone(clips)
            fh, fw = feats.shape[2:4]
            if gt_boxes is None:
                logits, deltas = self.rpn(feats)
            for i in range(n):
                if gt_boxes is not None:
                    props = np.asarray(gt_boxes[i], dtype=np.float64).reshape(-1, 4)
                    obj = np.ones(len(props))
                else:
                    ps = self.propose(logits.data[i], deltas.data[i], (fh, fw), (ih, iw), r)
                    props, obj = ps.boxes, ps.scores
                c = self.num_classes
                if len(props) == 0:
                    results.append(DetectionSet(props, np.zeros((0, c, 4)), np.zeros((0, c)),
                                                np.zeros(0), obj))
                    continue
                out = self.heads(memory[i], props)
                cls_logits, reg = out.routed(self.cfg.head)
                probs = 0.5 * (1.0 + np.tanh(0.5 * cls_logits.data.astype(np.float64)))
                results.append(DetectionSet(
                    props, self.refine(props, reg.data, ih, iw), probs[:, :c], probs[:, c], obj, out.trace))
        return results
