"""Action Transformer head.

A person box is pooled from the keyframe, turned into a query, and refined by
stacked attention units that read the whole spatiotemporal feature map
(trunk features plus location embedding) as keys and values.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import tensor as tx
from .params import ModelParams
from .pooling import POOLED_SIZE
from .tensor import ShapeError, Tensor

QPR_MODES = ("highres", "lowres")


@dataclass(frozen=True)
class TxConfig:
    d_model: int = 128
    value_dim: int = 128
    heads: int = 2
    layers: int = 3
    dropout: float = 0.3
    ffn_hidden: int = 256
    qpr: str = "highres"
    qpr_channels: int = 32

    def __post_init__(self):
        if self.heads < 1 or self.layers < 1:
            raise ValueError("heads and layers must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if self.qpr not in QPR_MODES:
            raise ValueError(f"qpr must be one of {QPR_MODES}")
        if self.value_dim != self.d_model:
            raise ValueError("value_dim must equal d_model (values feed the residual branch)")


@dataclass
class AttentionTrace:
    """Softmax weights per (layer, head) over the T'*H'*W' memory cells."""

    grid: tuple                      # (T', H', W')
    weights: dict = field(default_factory=dict)   # (layer, head) -> (R, T'H'W') array

    @property
    def n_maps(self) -> int:
        return len(self.weights)

    def stacked(self) -> np.ndarray:
        """(layers, heads, R, T'H'W')."""
        layers = 1 + max(k[0] for k in self.weights)
        heads = 1 + max(k[1] for k in self.weights)
        return np.stack([np.stack([self.weights[(l, h)] for h in range(heads)]) for l in range(layers)])

    def for_proposal(self, r: int) -> dict:
        return {k: v[r].reshape(self.grid) for k, v in self.weights.items()}

    def records(self, clip_id: str):
        for (layer, head), w in sorted(self.weights.items()):
            for r in range(w.shape[0]):
                yield clip_id, r, layer, head, w[r]


def init_tx_head(params: ModelParams, in_channels: int, num_outputs: int, reg_outputs: int,
                 cfg: TxConfig) -> None:
    d = cfg.d_model
    if cfg.qpr == "highres":
        params.add_linear("tx.qpr.reduce", in_channels, cfg.qpr_channels)
        params.add_linear("tx.qpr.proj", POOLED_SIZE * POOLED_SIZE * cfg.qpr_channels, d)
    else:
        params.add_linear("tx.qpr.proj", in_channels, d)
    for l in range(cfg.layers):
        for h in range(cfg.heads):
            p = f"tx.l{l}.h{h}"
            params.add_linear(f"{p}.q", d, d)
            params.add_linear(f"{p}.k", in_channels, d)
            params.add_linear(f"{p}.v", in_channels, cfg.value_dim)
            params.add_layernorm(f"{p}.ln1", d)
            params.add_linear(f"{p}.ffn0", d, cfg.ffn_hidden, gain=2 ** 0.5)
            params.add_linear(f"{p}.ffn1", cfg.ffn_hidden, d)
            params.add_layernorm(f"{p}.ln2", d)
        params.add_linear(f"tx.l{l}.out", cfg.heads * d, d)
    params.add_linear("tx.cls", d, num_outputs)
    params.add_linear("tx.reg", d, reg_outputs, gain=0.1)


def qpr_highres(params: ModelParams, roi: Tensor) -> Tensor:
    """(R, 7, 7, F) -> (R, D): 1x1 channel reduction, flatten the 7x7 layout, project."""
    reduced = tx.conv1x1(roi, params["tx.qpr.reduce.w"], params["tx.qpr.reduce.b"])
    flat = tx.reshape(reduced, (roi.shape[0], -1))
    return tx.linear(flat, params["tx.qpr.proj.w"], params["tx.qpr.proj.b"])


def qpr_lowres(params: ModelParams, roi: Tensor) -> Tensor:
    """(R, 7, 7, F) -> (R, D): spatial average, project."""
    return tx.linear(tx.spatial_mean(roi), params["tx.qpr.proj.w"], params["tx.qpr.proj.b"])


def preprocess_query(params: ModelParams, roi: Tensor, cfg: TxConfig) -> Tensor:
    return qpr_highres(params, roi) if cfg.qpr == "highres" else qpr_lowres(params, roi)


def attention_logits(q: Tensor, k: Tensor) -> Tensor:
    """q: (R, D), k: (M, D) -> (R, M) dot products scaled by 1/sqrt(D)."""
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError("attention", q.shape, k.shape)
    return tx.mul(tx.matmul(q, tx.transpose(k)), 1.0 / math.sqrt(q.shape[-1]))


def _drop(x: Tensor, cfg: TxConfig, training: bool, key, tag: str) -> Tensor:
    if not training:
        return x
    return tx.dropout(x, cfg.dropout, True, None if key is None else tuple(key) + (tag,))


def tx_unit(params: ModelParams, prefix: str, query: Tensor, memory: Tensor, cfg: TxConfig,
            training: bool = False, key: Optional[Sequence] = None) -> tuple[Tensor, np.ndarray]:
    """One attention unit.

    query: (R, D); memory: (M, F) flattened cells. Returns the updated query
    (R, D) and the (R, M) softmax weights.
    """
    if memory.ndim != 2 or memory.shape[-1] != params[f"{prefix}.k.w"].shape[0]:
        raise ShapeError("tx_unit", memory.shape, params[f"{prefix}.k.w"].shape)
    if query.shape[-1] != cfg.d_model:
        raise ShapeError("tx_unit", query.shape, (cfg.d_model,))
    keys = tx.linear(memory, params[f"{prefix}.k.w"], params[f"{prefix}.k.b"])
    values = tx.linear(memory, params[f"{prefix}.v.w"], params[f"{prefix}.v.b"])
    q = tx.linear(query, params[f"{prefix}.q.w"], params[f"{prefix}.q.b"])
    weights = tx.softmax(attention_logits(q, keys), axis=-1)
    attended = tx.matmul(weights, values)
    q1 = tx.layernorm(query + _drop(attended, cfg, training, key, f"{prefix}.attn"),
                      params[f"{prefix}.ln1.gain"], params[f"{prefix}.ln1.bias"])
    ffn = tx.linear(tx.relu(tx.linear(q1, params[f"{prefix}.ffn0.w"], params[f"{prefix}.ffn0.b"])),
                    params[f"{prefix}.ffn1.w"], params[f"{prefix}.ffn1.b"])
    q2 = tx.layernorm(q1 + _drop(ffn, cfg, training, key, f"{prefix}.ffn"),
                      params[f"{prefix}.ln2.gain"], params[f"{prefix}.ln2.bias"])
    return q2, weights.data


def tx_stack(params: ModelParams, query: Tensor, memory: Tensor, cfg: TxConfig,
             training: bool = False, key: Optional[Sequence] = None) -> tuple[Tensor, AttentionTrace]:
    """Run all layers; heads within a layer are concatenated and mapped back to D.

    memory: (T', H', W', F).
    """
    if memory.ndim != 4:
        raise ShapeError("tx_stack", memory.shape, ("T'", "H'", "W'", "F"))
    grid = tuple(memory.shape[:3])
    cells = tx.reshape(memory, (-1, memory.shape[-1]))
    trace = AttentionTrace(grid)
    q = query
    for l in range(cfg.layers):
        outs = []
        for h in range(cfg.heads):
            out, w = tx_unit(params, f"tx.l{l}.h{h}", q, cells, cfg, training, key)
            outs.append(out)
            trace.weights[(l, h)] = w
        joined = outs[0] if len(outs) == 1 else tx.concat(outs, axis=-1)
        q = tx.linear(joined, params[f"tx.l{l}.out.w"], params[f"tx.l{l}.out.b"])
    return q, trace


def head_outputs(params: ModelParams, feature: Tensor, prefix: str = "tx") -> tuple[Tensor, Tensor]:
    """(R, D) -> class logits (R, C+1) and box deltas (R, 4) or (R, 4C)."""
    logits = tx.linear(feature, params[f"{prefix}.cls.w"], params[f"{prefix}.cls.b"])
    deltas = tx.linear(feature, params[f"{prefix}.reg.w"], params[f"{prefix}.reg.b"])
    return logits, deltas


def tx_head_forward(params: ModelParams, roi: Tensor, memory: Tensor, cfg: TxConfig,
                    training: bool = False, key: Optional[Sequence] = None):
    """Pooled keyframe RoIs (R, 7, 7, F) + memory (T', H', W', F) -> (logits, deltas, trace)."""
    query = preprocess_query(params, roi, cfg)
    feature, trace = tx_stack(params, query, memory, cfg, training, key)
    logits, deltas = head_outputs(params, feature, "tx")
    return logits, deltas, trace


def combined_head_mode(tx_logits, tx_deltas, i3d_logits=None, i3d_deltas=None, mode: str = "tx"):
    """Route classification and regression outputs by head mode.

    ``tx+i3d`` classifies with the Tx head and regresses with the I3D head.
    """
    if mode == "tx":
        return tx_logits, tx_deltas
    if mode == "i3d":
        return i3d_logits, i3d_deltas
    if mode == "tx+i3d":
        return tx_logits, i3d_deltas
    raise ValueError(f"unknown head mode {mode!r}")
