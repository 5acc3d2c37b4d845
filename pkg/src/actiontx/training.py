"""Proposal matching, losses, schedule, augmentation and the training loop."""
from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import geometry as geo
from . import tensor as tx
from .checkpoint import load_checkpoint, save_checkpoint
from .model import Detector, ModelConfig
from .rpn import label_anchors
from .synthdata import ClipSample
from .tensor import Tensor, key_to_int, make_node


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    warmup_steps: int = 100
    base_lr: float = 0.003
    warmup_start_lr: float = 0.0003
    momentum: float = 0.9
    batch_size: int = 4
    seed: int = 0
    gt_boxes: bool = False
    action_agnostic: bool = False
    augment: bool = True
    rpn_loss_weight: float = 1.0
    neg_pos_ratio: float = 3.0
    max_head_samples: int = 32
    fg_iou: float = 0.5
    rpn_pos_iou: float = 0.7
    rpn_neg_iou: float = 0.3
    clip_grad_norm: float = 10.0
    precision: str = "float32"

    def __post_init__(self):
        if self.warmup_steps >= self.steps:
            raise ValueError("warmup_steps must be smaller than steps")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.precision not in ("float32", "float64"):
            raise ValueError("precision must be float32 or float64")


class TrainingDivergedError(RuntimeError):
    pass


# ---------------------------------------------------------------- schedule

def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to the base rate, then cosine annealing to zero at ``cfg.steps``."""
    if not 0 <= step <= cfg.steps:
        raise ValueError(f"step {step} outside [0, {cfg.steps}]")
    if step < cfg.warmup_steps:
        return cfg.warmup_start_lr + (cfg.base_lr - cfg.warmup_start_lr) * step / cfg.warmup_steps
    progress = (step - cfg.warmup_steps) / (cfg.steps - cfg.warmup_steps)
    return cfg.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


# ---------------------------------------------------------------- losses

def sigmoid_cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Elementwise logistic loss with logits; stable for large |x|."""
    x = logits.data
    z = np.asarray(targets, dtype=x.dtype)
    if z.shape != x.shape:
        raise tx.ShapeError("sigmoid_cross_entropy", x.shape, z.shape)
    if np.any((z != 0) & (z != 1)):
        raise ValueError("targets must be 0 or 1")
    loss = np.maximum(x, 0) - x * z + np.log1p(np.exp(-np.abs(x)))
    p = 0.5 * (1.0 + np.tanh(0.5 * x))
    return make_node(loss, (logits,), lambda g: (g * (p - z),), "sigmoid_xent")


def smooth_l1(x: Tensor) -> Tensor:
    """0.5 x^2 for |x| < 1, |x| - 0.5 otherwise (elementwise)."""
    d = x.data
    a = np.abs(d)
    small = a < 1.0
    out = np.where(small, 0.5 * d * d, a - 0.5)
    return make_node(out, (x,), lambda g: (g * np.where(small, d, np.sign(d)),), "smooth_l1")


def classification_loss(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Sum over classes of sigmoid cross-entropy; averaged over rows for 2-D input."""
    per = sigmoid_cross_entropy(logits, targets)
    if per.ndim == 1:
        return per.sum()
    return per.sum(axis=-1).mean()


def regression_loss(pred: Tensor, target: np.ndarray) -> Tensor:
    """Summed smooth-L1 between predicted and target deltas."""
    diff = pred - tx.Tensor(np.asarray(target, dtype=pred.dtype))
    return smooth_l1(diff).sum()


# ---------------------------------------------------------------- matching

@dataclass
class MatchResult:
    labels: np.ndarray      # (P, C+1); last column is background
    deltas: np.ndarray      # (P, 4) regression targets (zeros for negatives)
    positive: np.ndarray    # (P,) bool
    gt_index: np.ndarray    # (P,) matched GT or -1


def match_proposals(proposals: np.ndarray, gt_boxes: np.ndarray, gt_labels: np.ndarray,
                    iou_threshold: float = 0.5) -> MatchResult:
    """Assign each proposal to its best-IoU GT; IoU >= threshold makes it positive."""
    proposals = np.asarray(proposals, dtype=np.float64).reshape(-1, 4)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    gt_labels = np.asarray(gt_labels).reshape(len(gt_boxes), -1)
    c = gt_labels.shape[1]
    p = len(proposals)
    labels = np.zeros((p, c + 1), dtype=np.float64)
    deltas = np.zeros((p, 4))
    gt_index = np.full(p, -1, dtype=np.int64)
    if len(gt_boxes):
        ious = geo.iou_matrix(proposals, gt_boxes)
        best = ious.argmax(axis=1)
        positive = ious[np.arange(p), best] >= iou_threshold
        gt_index[positive] = best[positive]
    else:
        positive = np.zeros(p, dtype=bool)
    pos = np.flatnonzero(positive)
    labels[pos, :c] = gt_labels[gt_index[pos]]
    labels[~positive, c] = 1.0
    if len(pos):
        deltas[pos] = geo.encode_deltas(proposals[pos], gt_boxes[gt_index[pos]])
    return MatchResult(labels, deltas, positive, gt_index)


def sample_indices(positive: np.ndarray, negative: np.ndarray, ratio: float, cap: int,
                   rng: np.random.Generator) -> np.ndarray:
    """All positives (up to ``cap``) plus negatives up to ``ratio`` per positive."""
    pos = np.flatnonzero(positive)
    neg = np.flatnonzero(negative)
    if len(pos) > cap:
        pos = np.sort(rng.choice(pos, cap, replace=False))
    n_neg = min(len(neg), int(ratio * max(len(pos), 1)), max(cap - len(pos), 0))
    if n_neg < len(neg):
        neg = np.sort(rng.choice(neg, n_neg, replace=False))
    return np.concatenate([pos, neg]).astype(np.int64)


def collapse_labels(labels: np.ndarray) -> np.ndarray:
    """Action-agnostic labels: every annotated person is one 'active' class."""
    return np.ones((len(labels), 1), dtype=np.uint8)


# ---------------------------------------------------------------- augmentation

def augment(clip: np.ndarray, boxes: np.ndarray, rng: np.random.Generator, enabled: bool = True,
            flip_p: float = 0.5, scale_range=(0.8, 1.0), min_keep: float = 0.5,
            max_retries: int = 10):
    """Random horizontal flip and crop-and-resize applied to pixels and boxes.

    Returns (clip, boxes, keep) where ``keep`` flags GT boxes that retain at
    least ``min_keep`` of their area. A crop that would drop every GT box is
    redrawn, up to ``max_retries`` times, then the crop is skipped.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    keep = np.ones(len(boxes), dtype=bool)
    if not enabled:
        return clip, boxes, keep
    t, h, w, _ = clip.shape
    if rng.random() < flip_p:
        clip = clip[:, :, ::-1]
        boxes = geo.hflip_boxes(boxes, w)
    areas = geo.box_areas(boxes)
    for _ in range(max_retries):
        s = rng.uniform(*scale_range)
        ch, cw = max(1, int(round(s * h))), max(1, int(round(s * w)))
        oy = int(rng.integers(0, h - ch + 1))
        ox = int(rng.integers(0, w - cw + 1))
        nb = boxes - np.array([ox, oy, ox, oy])
        nb = geo.clip_boxes(nb, ch, cw)
        k = geo.box_areas(nb) >= min_keep * np.maximum(areas, 1e-9)
        if len(boxes) == 0 or k.any():
            break
    else:
        return np.ascontiguousarray(clip), boxes, keep
    rows = oy + np.minimum((np.arange(h) + 0.5) * ch / h, ch - 1e-9).astype(np.int64)
    cols = ox + np.minimum((np.arange(w) + 0.5) * cw / w, cw - 1e-9).astype(np.int64)
    out = clip[:, rows][:, :, cols]
    nb = nb * np.array([w / cw, h / ch, w / cw, h / ch])
    return np.ascontiguousarray(out), nb, k


# ---------------------------------------------------------------- trainer

@dataclass
class StepLosses:
    rpn_cls: float = 0.0
    rpn_reg: float = 0.0
    head_cls: float = 0.0
    head_reg: float = 0.0
    total: float = 0.0
    lr: float = 0.0
    grad_norm: float = 0.0

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def config_hash(model_cfg: ModelConfig, train_cfg: TrainConfig, extra: Optional[dict] = None) -> bytes:
    import hashlib
    from dataclasses import asdict

    body = json.dumps({"model": asdict(model_cfg), "train": asdict(train_cfg), "extra": extra or {}},
                      sort_keys=True, default=list)
    return hashlib.sha256(body.encode()).digest()


class Trainer:
    """Owns the detector, momentum buffers and the step counter.

    Every random choice at step s (batch order, augmentation, sampling,
    dropout) is keyed by (seed, s, ...), so a run resumed at s replays the
    uninterrupted run exactly.
    """

    def __init__(self, model_cfg: ModelConfig, train_cfg: TrainConfig, samples: Sequence[ClipSample],
                 log_path=None, hash_extra: Optional[dict] = None):
        self.model_cfg = model_cfg
        self.cfg = train_cfg
        self.samples = list(samples)
        if not self.samples:
            raise ValueError("no training samples")
        n_cls = 1 if train_cfg.action_agnostic else model_cfg.num_classes
        dtype = np.float32 if train_cfg.precision == "float32" else np.float64
        self.model = Detector(model_cfg, n_cls, seed=train_cfg.seed, dtype=dtype)
        self.momentum = {k: np.zeros_like(v.data) for k, v in self.model.params.items()}
        self.step = 0
        self.log_path = Path(log_path) if log_path else None
        self.hash = config_hash(model_cfg, train_cfg, hash_extra)
        self.history: list[dict] = []

    @property
    def params(self):
        return self.model.params

    # -- data
    def batch_indices(self, step: int) -> list[int]:
        n = len(self.samples)
        out = []
        for j in range(self.cfg.batch_size):
            pos = step * self.cfg.batch_size + j
            epoch, off = divmod(pos, n)
            perm = np.random.default_rng([self.cfg.seed, key_to_int("data"), epoch]).permutation(n)
            out.append(int(perm[off]))
        return out

    def _rng(self, step: int, *tags) -> np.random.Generator:
        return np.random.default_rng([self.cfg.seed, step, key_to_int(*tags)])

    def _labels(self, s: ClipSample) -> np.ndarray:
        return collapse_labels(s.labels) if self.cfg.action_agnostic else s.labels

    # -- one step
    def compute_losses(self, step: int) -> tuple[Tensor, StepLosses]:
        cfg = self.cfg
        model = self.model
        batch = [self.samples[i] for i in self.batch_indices(step)]
        clips, gts, labs = [], [], []
        for slot, s in enumerate(batch):
            clip, boxes, keep = augment(s.video, s.boxes, self._rng(step, "aug", slot), cfg.augment)
            clips.append(clip)
            gts.append(boxes[keep])
            labs.append(self._labels(s)[keep])
        clips = np.stack(clips)
        n, _, ih, iw, _ = clips.shape
        feats, memory = model.backbone(clips)
        fh, fw = feats.shape[2:4]
        dt = model.dtype
        terms = {"rpn_cls": [], "rpn_reg": [], "head_cls": [], "head_reg": []}
        proposals = [None] * n
        if not cfg.gt_boxes:
            rpn_logits, rpn_deltas = model.rpn(feats)
            anchors = model.anchors(fh, fw)
            for i in range(n):
                lab, best = label_anchors(anchors, gts[i], cfg.rpn_pos_iou, cfg.rpn_neg_iou)
                idx = sample_indices(lab == 1, lab == 0, cfg.neg_pos_ratio, len(anchors),
                                     self._rng(step, "rpn", i))
                if len(idx):
                    lg = rpn_logits[i][idx]
                    terms["rpn_cls"].append(sigmoid_cross_entropy(lg, (lab[idx] == 1).astype(dt)).mean())
                pos = np.flatnonzero(lab == 1)
                if len(pos):
                    target = geo.encode_deltas(anchors[pos], gts[i][best[pos]])
                    terms["rpn_reg"].append(tx.mul(regression_loss(rpn_deltas[i][pos], target), 1.0 / len(pos)))
                props = model.propose(rpn_logits.data[i], rpn_deltas.data[i], (fh, fw), (ih, iw))
                proposals[i] = np.concatenate([props.boxes, gts[i]], axis=0)
        else:
            proposals = [g.copy() for g in gts]

        for i in range(n):
            props = proposals[i]
            if len(props) == 0:
                continue
            m = match_proposals(props, gts[i], labs[i], cfg.fg_iou)
            idx = sample_indices(m.positive, ~m.positive, cfg.neg_pos_ratio, cfg.max_head_samples,
                                 self._rng(step, "head", i))
            if len(idx) == 0:
                continue
            out = model.heads(memory[i], props[idx], training=True, key=(cfg.seed, step, i))
            pos_local = np.flatnonzero(m.positive[idx])
            for logits, deltas in out.loss_pairs():
                terms["head_cls"].append(classification_loss(logits, m.labels[idx].astype(dt)))
                if len(pos_local):
                    terms["head_reg"].append(self._head_reg_loss(deltas, m, idx, pos_local))

        def avg(key):
            items = terms[key]
            if not items:
                return None
            acc = items[0]
            for t in items[1:]:
                acc = acc + t
            return tx.mul(acc, 1.0 / n)

        parts = {k: avg(k) for k in terms}
        total = None
        for k, v in parts.items():
            if v is None:
                continue
            w = cfg.rpn_loss_weight if k.startswith("rpn") else 1.0
            v = tx.mul(v, w) if w != 1.0 else v
            total = v if total is None else total + v
        if total is None:
            total = tx.Tensor(np.zeros((), dtype=dt))
        losses = StepLosses(**{k: (0.0 if v is None else v.item()) for k, v in parts.items()})
        losses.total = total.item()
        return total, losses

    def _head_reg_loss(self, deltas: Tensor, m: MatchResult, idx: np.ndarray, pos_local: np.ndarray) -> Tensor:
        dt = deltas.dtype
        pred = deltas[pos_local]
        target = m.deltas[idx][pos_local]
        if pred.shape[-1] == 4:
            return tx.mul(regression_loss(pred, target), 1.0 / len(pos_local))
        # class-specific: each active class's regressor learns the box
        c = pred.shape[-1] // 4
        pred3 = tx.reshape(pred, (len(pos_local), c, 4))
        act = m.labels[idx][pos_local][:, :c]
        weight = act / np.maximum(act.sum(axis=1, keepdims=True), 1.0)
        diff = pred3 - tx.Tensor(target[:, None, :].astype(dt))
        per = tx.mul(smooth_l1(diff), tx.Tensor(weight[:, :, None].astype(dt)))
        return tx.mul(per.sum(), 1.0 / len(pos_local))

    def train_step(self) -> StepLosses:
        step = self.step
        lr = lr_at(step, self.cfg)
        self.params.zero_grad()
        t0 = time.perf_counter()
        total, losses = self.compute_losses(step)
        if not np.isfinite(losses.total):
            raise TrainingDivergedError(self._diagnostic(step, lr, losses))
        tx.backward(total, self.params.values())
        grads = {k: p.grad for k, p in self.params.items()}
        norm = float(np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values())))
        if not np.isfinite(norm):
            raise TrainingDivergedError(self._diagnostic(step, lr, losses, grads))
        scale = 1.0
        if self.cfg.clip_grad_norm > 0 and norm > self.cfg.clip_grad_norm:
            scale = self.cfg.clip_grad_norm / norm
        mu = self.cfg.momentum
        for k, p in self.params.items():
            g = grads[k] * p.data.dtype.type(scale) if scale != 1.0 else grads[k]
            v = self.momentum[k] * p.data.dtype.type(mu) + g
            self.momentum[k] = v
            p.data = p.data - p.data.dtype.type(lr) * v
        self.params.zero_grad()
        losses.lr = lr
        losses.grad_norm = norm
        self.step += 1
        rec = {"step": step, **losses.as_dict(), "wall": time.perf_counter() - t0}
        self.history.append(rec)
        if self.log_path is not None:
            with open(self.log_path, "a") as f:
                f.write(json.dumps(rec) + "\n")
        return losses

    def _diagnostic(self, step, lr, losses, grads=None) -> str:
        msg = f"non-finite loss at step {step} (lr={lr:.4g}): {losses.as_dict()}"
        if grads:
            norms = {k: float(np.linalg.norm(g)) for k, g in grads.items()}
            msg += f"; grad norms: {norms}"
        return msg

    def run(self, until: Optional[int] = None, callback=None) -> None:
        end = self.cfg.steps if until is None else min(until, self.cfg.steps)
        while self.step < end:
            losses = self.train_step()
            if callback is not None:
                callback(self.step, losses)

    # -- persistence
    def save(self, path) -> None:
        tensors = {f"param/{k}": v.data for k, v in self.params.items()}
        tensors.update({f"momentum/{k}": v for k, v in self.momentum.items()})
        save_checkpoint(path, tensors, self.step, self.hash)

    def load(self, path) -> None:
        step, tensors = load_checkpoint(path, expected_hash=self.hash)
        self.params.load_state({k[len("param/"):]: v for k, v in tensors.items() if k.startswith("param/")})
        for k in self.momentum:
            self.momentum[k] = tensors[f"momentum/{k}"].astype(self.params[k].dtype, copy=True)
        self.step = step
