import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from actiontx import geometry as geo
from actiontx import tensor as tx
from actiontx import training as tr
from actiontx.model import ModelConfig
from actiontx.synthdata import SceneSpec, generate_samples
from actiontx.tensor import Tensor

LARGE_LR = tr.TrainConfig(steps=2000, warmup_steps=100, base_lr=0.1, warmup_start_lr=0.01)
TINY = ModelConfig(trunk_channels=(4, 4, 8, 8), emb_hidden=4, emb_out=4, rpn_hidden=8, proposals=16,
                   d_model=16, heads=2, layers=1, ffn_hidden=16, qpr_channels=4, i3d_channels=8)


@pytest.fixture(scope="module")
def samples():
    return generate_samples(SceneSpec(seed=0), 12)


def _trainer(samples, **kw):
    model = kw.pop("model", TINY)
    base = dict(steps=20, warmup_steps=2, batch_size=2)
    base.update(kw)
    return tr.Trainer(model, tr.TrainConfig(**base), samples)


# ---------------------------------------------------------------- losses

def test_logit_zero_costs_ln2_per_class():
    loss = tr.classification_loss(Tensor(np.zeros(5)), np.ones(5))
    assert loss.item() == pytest.approx(5 * math.log(2), abs=1e-12)


def test_saturated_logit_costs_nothing():
    assert tr.classification_loss(Tensor(np.array([20.0])), np.array([1.0])).item() < 3e-9
    assert np.isfinite(tr.classification_loss(Tensor(np.array([-800.0, 800.0])), np.array([1.0, 0.0])).item())


def test_targets_outside_binary_rejected():
    with pytest.raises(ValueError):
        tr.classification_loss(Tensor(np.zeros(2)), np.array([0.5, 1.0]))


@given(st.integers(0, 10_000))
def test_classification_loss_class_permutation_equivariant(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((3, 6))
    z = (rng.random((3, 6)) < 0.5).astype(float)
    perm = rng.permutation(6)
    a = tr.classification_loss(Tensor(x), z).item()
    b = tr.classification_loss(Tensor(x[:, perm]), z[:, perm]).item()
    assert a == pytest.approx(b, abs=1e-12)


@pytest.mark.parametrize("x,expect", [(0.0, 0.0), (1.0, 0.5), (2.0, 1.5), (-2.0, 1.5), (0.5, 0.125)])
def test_smooth_l1_values(x, expect):
    assert tr.regression_loss(Tensor(np.array([x])), np.zeros(1)).item() == pytest.approx(expect)


def test_loss_gradients():
    rng = np.random.default_rng(0)
    x = Tensor(rng.standard_normal((4, 3)) * 2, requires_grad=True)
    z = (rng.random((4, 3)) < 0.5).astype(float)
    t = rng.standard_normal((4, 3)) * 2
    rep = tx.grad_check(lambda: tr.classification_loss(x, z) + tr.regression_loss(x, t), {"x": x})
    assert rep.passed, rep.summary()


# ---------------------------------------------------------------- schedule

def test_large_lr_schedule_values():
    assert tr.lr_at(0, LARGE_LR) == pytest.approx(0.01, abs=1e-15)
    assert tr.lr_at(100, LARGE_LR) == pytest.approx(0.1, abs=1e-15)
    assert tr.lr_at(2000, LARGE_LR) < 1e-6 * LARGE_LR.base_lr
    assert tr.lr_at(1050, LARGE_LR) == pytest.approx(0.05, abs=1e-12)


def test_schedule_continuous_at_warmup_boundary():
    left = LARGE_LR.warmup_start_lr + (LARGE_LR.base_lr - LARGE_LR.warmup_start_lr) * 1.0
    assert abs(left - tr.lr_at(LARGE_LR.warmup_steps, LARGE_LR)) < 1e-12
    eps = abs(tr.lr_at(99, LARGE_LR) - tr.lr_at(100, LARGE_LR))
    assert eps < 1e-3


def test_schedule_monotone_segments():
    lrs = [tr.lr_at(s, LARGE_LR) for s in range(2001)]
    assert np.all(np.diff(lrs[:101]) > 0)
    assert np.all(np.diff(lrs[100:]) <= 0)


def test_schedule_domain_and_config_validation():
    with pytest.raises(ValueError):
        tr.lr_at(2001, LARGE_LR)
    with pytest.raises(ValueError):
        tr.TrainConfig(steps=10, warmup_steps=10)


# ---------------------------------------------------------------- matching

def brute_force_match(props, gts, thr):
    out = []
    for p in props:
        best, bi = -1.0, -1
        for j, g in enumerate(gts):
            v = geo.iou(p, g)
            if v > best:
                best, bi = v, j
        out.append(bi if best >= thr else -1)
    return out


@pytest.mark.parametrize("seed", range(10))
def test_matching_equals_exhaustive_oracle(seed):
    rng = np.random.default_rng(seed)
    g = rng.uniform(0, 40, (4, 2))
    gts = np.concatenate([g, g + rng.uniform(8, 20, (4, 2))], axis=1)
    props = np.concatenate([gts + rng.normal(0, 3, gts.shape) for _ in range(5)])
    labels = (rng.random((4, 3)) < 0.5).astype(np.uint8)
    m = tr.match_proposals(props, gts, labels)
    assert m.gt_index.tolist() == brute_force_match(props, gts, 0.5)
    pos = m.positive
    np.testing.assert_array_equal(m.labels[pos, :3], labels[m.gt_index[pos]])
    assert np.all(m.labels[pos, 3] == 0) and np.all(m.labels[~pos, 3] == 1)
    assert np.all(m.labels[~pos, :3] == 0) and np.all(m.deltas[~pos] == 0)


def test_match_exact_and_disjoint():
    gts = np.array([[0.0, 0, 10, 10]])
    m = tr.match_proposals(np.array([[0.0, 0, 10, 10], [50.0, 50, 60, 60]]), gts, np.array([[1, 0]]))
    assert m.positive.tolist() == [True, False]
    assert m.labels.tolist() == [[1, 0, 0], [0, 0, 1]]


def test_sampling_keeps_all_positives_and_ratio():
    rng = np.random.default_rng(0)
    pos = np.zeros(100, bool)
    pos[:5] = True
    idx = tr.sample_indices(pos, ~pos, 3.0, 64, rng)
    assert set(range(5)) <= set(idx.tolist())
    assert len(idx) == 20


# ---------------------------------------------------------------- augmentation

def test_flip_formula_and_involution():
    b = np.array([[3.0, 1.0, 10.0, 7.0]])
    f = geo.hflip_boxes(b, 64)
    assert f[0, 0] == 64 - 10 and f[0, 2] == 64 - 3
    np.testing.assert_array_equal(geo.hflip_boxes(f, 64), b)


def test_no_aug_is_identity():
    clip = np.random.default_rng(0).integers(0, 255, (8, 64, 64, 3), dtype=np.uint8)
    boxes = np.array([[1.0, 2.0, 20.0, 30.0]])
    out, nb, keep = tr.augment(clip, boxes, np.random.default_rng(1), enabled=False)
    assert out is clip
    np.testing.assert_array_equal(nb, boxes)
    assert keep.all()


@pytest.mark.parametrize("seed", range(20))
def test_augment_consistent_and_keeps_some_gt(seed):
    s = generate_samples(SceneSpec(seed=1), 1, start=seed)[0]
    out, nb, keep = tr.augment(s.video, s.boxes, np.random.default_rng(seed))
    assert out.shape == s.video.shape
    assert keep.any()
    assert np.all(nb >= 0) and np.all(nb[:, [0, 2]] <= 64) and np.all(nb[:, [1, 3]] <= 64)


def test_flip_only_moves_pixels_with_boxes():
    clip = np.zeros((1, 16, 32, 3), np.uint8)
    clip[0, 2:6, 3:9] = 255
    box = np.array([[3.0, 2.0, 9.0, 6.0]])
    out, nb, _ = tr.augment(clip, box, np.random.default_rng(0), flip_p=1.0, scale_range=(1.0, 1.0))
    x1, y1, x2, y2 = nb[0].astype(int)
    assert np.all(out[0, y1:y2, x1:x2] == 255)
    assert out.sum() == clip.sum()


# ---------------------------------------------------------------- trainer

def test_gt_mode_has_zero_rpn_loss(samples):
    t = _trainer(samples, gt_boxes=True)
    _, losses = t.compute_losses(0)
    assert losses.rpn_cls == 0.0 and losses.rpn_reg == 0.0
    assert losses.head_cls > 0


def test_standard_mode_has_rpn_loss(samples):
    _, losses = _trainer(samples).compute_losses(0)
    assert losses.rpn_cls > 0 and losses.head_cls > 0


def test_action_agnostic_has_two_logits(samples):
    t = _trainer(samples, action_agnostic=True, gt_boxes=True)
    assert t.model.num_classes == 1
    _, memory = t.model.backbone(samples[0].video[None])
    out = t.model.heads(memory[0], samples[0].boxes)
    assert out.tx_logits.shape == (len(samples[0].boxes), 2)


def test_two_runs_bit_identical_every_step(samples):
    a, b = _trainer(samples, steps=6), _trainer(samples, steps=6)
    for _ in range(6):
        la, lb = a.train_step(), b.train_step()
        assert la.total == lb.total
        for k, v in a.params.items():
            assert v.data.tobytes() == b.params[k].data.tobytes()


def test_resume_matches_uninterrupted(samples, tmp_path):
    full = _trainer(samples, steps=8)
    full.run(until=4)
    full.save(tmp_path / "ck.bin")
    full.run()
    res = _trainer(samples, steps=8)
    res.load(tmp_path / "ck.bin")
    assert res.step == 4
    res.run()
    for k, v in full.params.items():
        assert v.data.tobytes() == res.params[k].data.tobytes()
    assert [h["total"] for h in full.history[4:]] == [h["total"] for h in res.history]


def test_load_rejects_other_config(samples, tmp_path):
    a = _trainer(samples, steps=8)
    a.save(tmp_path / "ck.bin")
    b = _trainer(samples, steps=9)
    with pytest.raises(ValueError, match="hash"):
        b.load(tmp_path / "ck.bin")


def test_divergence_raises_with_diagnostic(samples):
    t = _trainer(samples)
    t.params["trunk.conv0.w"].data[:] = np.nan
    with pytest.raises(tr.TrainingDivergedError, match="step 0"):
        t.train_step()


def test_log_written(samples, tmp_path):
    import json

    t = tr.Trainer(TINY, tr.TrainConfig(steps=3, warmup_steps=1, batch_size=1), samples, tmp_path / "log.ndjson")
    t.run()
    recs = [json.loads(l) for l in (tmp_path / "log.ndjson").read_text().splitlines()]
    assert [r["step"] for r in recs] == [0, 1, 2]
    assert {"lr", "total", "head_cls", "rpn_cls", "wall"} <= set(recs[0])


def test_loss_decreases_over_first_200_steps():
    data = generate_samples(SceneSpec(seed=0), 32)
    drops = []
    for seed in range(5):
        t = tr.Trainer(TINY, tr.TrainConfig(steps=200, warmup_steps=10, batch_size=2, seed=seed,
                                            gt_boxes=True), data)
        t.run()
        tot = [h["total"] for h in t.history]
        drops.append(np.mean(tot[:20]) - np.mean(tot[-20:]))
    assert np.median(drops) > 0
