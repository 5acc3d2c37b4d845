"""Toy 3-D convolutional trunk and the coordinate embedding appended to it."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tx
from .params import ModelParams
from .tensor import ShapeError, Tensor

# (temporal, spatial) strides of the four trunk convolutions; product = (4, 16)
TRUNK_STRIDES = ((1, 2), (2, 2), (2, 2), (1, 2))
TEMPORAL_FACTOR = 4
SPATIAL_FACTOR = 16
KERNEL = (3, 3, 3)
PADDING = (1, 1, 1)


@dataclass(frozen=True)
class LocationEmbeddingConfig:
    spatial_hidden: int = 8
    temporal_hidden: int = 8
    out_per_branch: int = 8

    def __post_init__(self):
        if self.out_per_branch <= 0:
            raise ValueError("embedding output channels must be positive")

    @property
    def channels(self) -> int:
        return 2 * self.out_per_branch


def _conv_out(n: int, k: int, s: int, p: int) -> int:
    return (n + 2 * p - k) // s + 1


def check_input_dims(t: int, h: int, w: int) -> None:
    if t % TEMPORAL_FACTOR or h % SPATIAL_FACTOR or w % SPATIAL_FACTOR:
        raise ShapeError("trunk_forward", (t, h, w), (TEMPORAL_FACTOR, SPATIAL_FACTOR, SPATIAL_FACTOR),
                         detail="T must be divisible by 4 and H, W by 16")


def trunk_output_shape(t: int, h: int, w: int) -> tuple[int, int, int]:
    """Output (T', H', W') by propagating the conv arithmetic; no tensors involved."""
    check_input_dims(t, h, w)
    for st, ss in TRUNK_STRIDES:
        t = _conv_out(t, KERNEL[0], st, PADDING[0])
        h = _conv_out(h, KERNEL[1], ss, PADDING[1])
        w = _conv_out(w, KERNEL[2], ss, PADDING[2])
    return t, h, w


def init_trunk(params: ModelParams, channels=(16, 16, 32, 32), in_channels: int = 3) -> None:
    c_in = in_channels
    for i, c in enumerate(channels):
        params.add_conv3d(f"trunk.conv{i}", KERNEL, c_in, c)
        c_in = c


def init_location_embedding(params: ModelParams, cfg: LocationEmbeddingConfig) -> None:
    params.add_linear("emb.spatial.0", 2, cfg.spatial_hidden, gain=2 ** 0.5)
    params.add_linear("emb.spatial.1", cfg.spatial_hidden, cfg.out_per_branch)
    params.add_linear("emb.temporal.0", 1, cfg.temporal_hidden, gain=2 ** 0.5)
    params.add_linear("emb.temporal.1", cfg.temporal_hidden, cfg.out_per_branch)


def normalize_clip(clip: np.ndarray, dtype=np.float32) -> np.ndarray:
    return (np.asarray(clip, dtype=dtype) / 127.5 - 1.0).astype(dtype)


def trunk_forward(params: ModelParams, clip) -> Tensor:
    """(N, T, H, W, 3) clip -> (N, T/4, H/16, W/16, C) features.

    Dimensions are validated before any convolution runs.
    """
    x = clip if isinstance(clip, Tensor) else Tensor(clip)
    if x.ndim == 4:
        x = tx.reshape(x, (1,) + x.shape)
    if x.ndim != 5 or x.shape[-1] != 3:
        raise ShapeError("trunk_forward", x.shape, ("N", "T", "H", "W", 3))
    check_input_dims(*x.shape[1:4])
    n_layers = sum(1 for k in params if k.startswith("trunk.conv") and k.endswith(".w"))
    for i in range(n_layers):
        st, ss = TRUNK_STRIDES[i]
        x = tx.conv3d(x, params[f"trunk.conv{i}.w"], params[f"trunk.conv{i}.b"],
                      stride=(st, ss, ss), padding=PADDING)
        x = tx.relu(x)
    return x


def center_index(t_prime: int) -> int:
    return t_prime // 2


def slice_center(features: Tensor) -> Tensor:
    """Temporally central frame of (N, T', H', W', F) or (T', H', W', F) features."""
    if features.ndim == 5:
        return features[:, center_index(features.shape[1])]
    return features[center_index(features.shape[0])]


def normalized_coords(n: int) -> np.ndarray:
    """Cell indices mapped to [-1, 1] about the centre of an n-cell axis."""
    if n == 1:
        return np.zeros(1)
    half = (n - 1) / 2.0
    return (np.arange(n) - half) / half


def location_inputs(t: int, h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    """Raw per-cell inputs: spatial (H', W', 2) [h, w] and temporal (T', 1) [t]."""
    if min(t, h, w) <= 0:
        raise ValueError("feature dims must be positive")
    hh, ww = np.meshgrid(normalized_coords(h), normalized_coords(w), indexing="ij")
    return np.stack([hh, ww], axis=-1), normalized_coords(t)[:, None]


def location_embedding(params: ModelParams, t: int, h: int, w: int) -> Tensor:
    """(T', H', W', E) embedding; a function of coordinates and parameters only."""
    dtype = params["emb.spatial.0.w"].dtype
    sp_in, tm_in = location_inputs(t, h, w)
    sp = tx.Tensor(sp_in.astype(dtype))
    tm = tx.Tensor(tm_in.astype(dtype))
    sp = tx.linear(tx.relu(tx.linear(sp, params["emb.spatial.0.w"], params["emb.spatial.0.b"])),
                   params["emb.spatial.1.w"], params["emb.spatial.1.b"])
    tm = tx.linear(tx.relu(tx.linear(tm, params["emb.temporal.0.w"], params["emb.temporal.0.b"])),
                   params["emb.temporal.1.w"], params["emb.temporal.1.b"])
    e = sp.shape[-1]
    sp_b = tx.broadcast_to(tx.reshape(sp, (1, h, w, e)), (t, h, w, e))
    tm_b = tx.broadcast_to(tx.reshape(tm, (t, 1, 1, e)), (t, h, w, e))
    return tx.concat([sp_b, tm_b], axis=-1)


def append_embedding(features: Tensor, emb: Tensor) -> Tensor:
    """Concatenate embedding channels after the trunk channels."""
    batched = features.ndim == 5
    grid = features.shape[1:4] if batched else features.shape[:3]
    if tuple(grid) != tuple(emb.shape[:3]):
        raise ShapeError("append_embedding", features.shape, emb.shape)
    if batched:
        emb = tx.broadcast_to(tx.reshape(emb, (1,) + emb.shape), features.shape[:4] + (emb.shape[-1],))
    return tx.concat([features, emb], axis=-1)
