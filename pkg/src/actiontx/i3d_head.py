"""Context-free baseline head: 3-D convs over the pooled tube only."""
from __future__ import annotations

from . import tensor as tx
from .params import ModelParams
from .tensor import ShapeError, Tensor


def init_i3d_head(params: ModelParams, in_channels: int, num_outputs: int, reg_outputs: int,
                  channels: int = 32) -> None:
    params.add_conv3d("i3d.block0", (3, 3, 3), in_channels, channels)
    params.add_conv3d("i3d.block1", (3, 3, 3), channels, channels)
    params.add_linear("i3d.cls", channels, num_outputs)
    params.add_linear("i3d.reg", channels, reg_outputs, gain=0.1)


def i3d_head_forward(params: ModelParams, tube: Tensor) -> tuple[Tensor, Tensor]:
    """(R, T', 7, 7, F) tube -> class logits (R, C+1) and deltas (R, 4) or (R, 4C)."""
    if tube.ndim != 5:
        raise ShapeError("i3d_head", tube.shape, ("R", "T'", 7, 7, "F"))
    x = tube
    for blk in ("i3d.block0", "i3d.block1"):
        x = tx.relu(tx.conv3d(x, params[f"{blk}.w"], params[f"{blk}.b"], padding=(1, 1, 1)))
    r, t, h, w, c = x.shape
    pooled = tx.spatial_mean(tx.reshape(x, (r, t * h, w, c)))
    logits = tx.linear(pooled, params["i3d.cls.w"], params["i3d.cls.b"])
    deltas = tx.linear(pooled, params["i3d.reg.w"], params["i3d.reg.b"])
    return logits, deltas
