import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from actiontx import pooling as pl
from actiontx import tensor as tx
from actiontx.tensor import ShapeError, Tensor


def test_constant_map_pools_to_constant():
    f = Tensor(np.full((4, 5, 3), 2.5))
    out = pl.roipool(f, (8.0, 4.0, 60.0, 50.0))
    assert out.shape == (7, 7, 3)
    np.testing.assert_allclose(out.data, 2.5, atol=1e-12)


def test_horizontal_ramp_is_monotone_across_columns():
    ramp = np.tile(np.arange(8, dtype=float)[None, :, None], (6, 1, 1))
    out = pl.roipool(Tensor(ramp), (0.0, 0.0, 128.0, 96.0)).data[..., 0]
    # each row identical, strictly increasing along x
    np.testing.assert_allclose(out, np.broadcast_to(out[:1], out.shape), atol=1e-12)
    assert np.all(np.diff(out[0]) > 0)
    assert out[0, 0] >= 0 and out[0, -1] <= 7


def test_ramp_values_match_bilinear_oracle():
    # max of two adjacent crop samples = the larger (right) one on an increasing ramp
    ramp = np.tile(np.arange(8, dtype=float)[None, :, None], (4, 1, 1))
    x1, x2 = 16.0, 80.0
    out = pl.roipool(Tensor(ramp), (x1, 0.0, x2, 64.0)).data[0, :, 0]
    lo, hi = x1 / 16, x2 / 16
    pos = lo + (np.arange(14) + 0.5) * (hi - lo) / 14 - 0.5
    expect = np.clip(pos, 0, 7)[1::2]
    np.testing.assert_allclose(out, expect, atol=1e-12)


@given(st.floats(0, 40), st.floats(0, 40), st.floats(8, 60), st.floats(8, 60))
def test_output_shape_is_always_7x7(x, y, w, h):
    f = Tensor(np.random.default_rng(0).random((4, 6, 2)))
    assert pl.roipool(f, (x, y, x + w, y + h)).shape == (7, 7, 2)


def test_zero_area_box_raises():
    f = Tensor(np.zeros((4, 4, 1)))
    with pytest.raises(ValueError):
        pl.roipool(f, (10.0, 10.0, 10.0, 30.0))
    with pytest.raises(ValueError):
        # entirely outside the map clips to zero area
        pl.roipool(f, (100.0, 0.0, 120.0, 20.0))


def test_st_pool_equals_per_frame_pool():
    rng = np.random.default_rng(4)
    feats = Tensor(rng.standard_normal((3, 5, 6, 4)))
    boxes = np.array([[4.0, 3.0, 50.0, 70.0], [20.0, 10.0, 90.0, 40.0]])
    st_out = pl.st_roipool_batch(feats, boxes).data
    assert st_out.shape == (2, 3, 7, 7, 4)
    for t in range(3):
        per = pl.roipool_batch(Tensor(feats.data[t]), boxes).data
        np.testing.assert_allclose(st_out[:, t], per, atol=1e-12)


def test_rank_checked():
    with pytest.raises(ShapeError):
        pl.roipool(Tensor(np.zeros((2, 4, 4, 1))), (0, 0, 16, 16))
    with pytest.raises(ShapeError):
        pl.st_roipool(Tensor(np.zeros((4, 4, 1))), (0, 0, 16, 16))


def test_interpolation_rows_sum_to_one():
    w = pl.roi_weights(np.array([[3.0, 5.0, 41.0, 77.0]]), 6, 4)
    np.testing.assert_allclose(w.sum(axis=-1), 1.0, atol=1e-12)


def test_st_pool_gradients():
    rng = np.random.default_rng(9)
    feats = Tensor(rng.standard_normal((2, 3, 3, 2)), requires_grad=True)
    boxes = np.array([[2.0, 5.0, 37.0, 44.0]])
    proj = Tensor(rng.standard_normal((1, 2, 7, 7, 2)))

    rep = tx.grad_check(lambda: (pl.st_roipool_batch(feats, boxes) * proj).sum(),
                        {"f": feats}, max_entries=18)
    assert rep.passed, rep.summary()
