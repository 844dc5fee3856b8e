import csv
import math

import numpy as np
import pytest

from deen.augment import DESK_GEOMETRY, FULL_SCALE_GEOMETRY, AugmentConfig, augment, erase, hflip, resize_bilinear
from deen.backbone import DeenNet, ModelConfig, checkpoint_bytes
from deen.errors import ConfigError, ContractError, ProtocolError
from deen.ndtensor import Tensor
from deen.synthdata import DatasetIndex, SampleRecord, SyntheticConfig, generate_dataset
from deen.training import (
    LOSS_CSV_FIELDS,
    TrainConfig,
    clip_grad_norm,
    fit,
    lr_schedule,
    sample_batch,
    sgd_step,
    steps_per_epoch,
)

HW = (16, 8)
SMALL_MODEL = dict(stage_channels=(4, 8, 8, 16, 16), input_hw=HW)


@pytest.fixture(scope="module")
def tiny_index():
    ds = generate_dataset(SyntheticConfig(num_identities=12, samples_per_id_per_modality=4, image_hw=HW, seed=1))
    return ds.train_index


def small_train(**kw):
    base = dict(ids_per_batch=3, vis_per_id=2, ir_per_id=2, epochs=2, augment=AugmentConfig(out_hw=HW))
    base.update(kw)
    return TrainConfig(**base)


# ------------------------------------------------------------------ sampler


def fake_index(vis_counts, ir_counts):
    recs = []
    for ident, (nv, ni) in enumerate(zip(vis_counts, ir_counts)):
        recs += [SampleRecord(np.zeros((1, 2, 2), np.float32), ident, 0, 0) for _ in range(nv)]
        recs += [SampleRecord(np.zeros((1, 2, 2), np.float32), ident, 1, 0) for _ in range(ni)]
    return DatasetIndex.from_records(recs)


def test_default_batch_composition():
    cfg = TrainConfig()
    assert cfg.batch_size == 48
    idx = fake_index([6] * 10, [6] * 10)
    b = sample_batch(idx, cfg, np.random.default_rng(0))
    assert b.size == 48 and len(set(b.identities.tolist())) == 6
    for cls in np.unique(b.vis_labels):
        assert (b.vis_labels == cls).sum() == 4 and (b.ir_labels == cls).sum() == 4
    assert all(idx.records[r].modality == 0 for r in b.vis_refs)
    assert all(idx.records[r].modality == 1 for r in b.ir_refs)
    assert all(idx.class_of[idx.records[r].identity] == c for r, c in zip(b.vis_refs, b.vis_labels))


def test_short_identity_draws_with_replacement():
    idx = fake_index([2] * 6, [5] * 6)
    b = sample_batch(idx, TrainConfig(), np.random.default_rng(0))
    assert len(b.vis_refs) == 24 and len(set(b.vis_refs.tolist())) <= 12


def test_too_few_identities():
    with pytest.raises(ProtocolError):
        sample_batch(fake_index([4] * 5, [4] * 5), TrainConfig(), np.random.default_rng(0))


def test_sampler_is_seed_deterministic():
    idx = fake_index([5] * 9, [5] * 9)
    a = [sample_batch(idx, TrainConfig(), np.random.default_rng(3)).vis_refs for _ in range(3)]
    b = [sample_batch(idx, TrainConfig(), np.random.default_rng(3)).vis_refs for _ in range(3)]
    assert all(np.array_equal(x, y) for x, y in zip(a, b))


# ----------------------------------------------------------------- schedule


@pytest.mark.parametrize("epoch,lr", [(0, 1e-2), (15, 1e-1), (25, 1e-2), (80, 1e-3), (125, 1e-4)])
def test_schedule_table(epoch, lr):
    assert lr_schedule(epoch, TrainConfig()) == pytest.approx(lr, rel=1e-12)


def test_schedule_segments():
    cfg = TrainConfig()
    lrs = [lr_schedule(e, cfg) for e in range(150)]
    assert all(a < b for a, b in zip(lrs[:10], lrs[1:11]))  # warm-up rises
    for lo, hi, v in [(10, 20, 0.1), (20, 60, 1e-2), (60, 120, 1e-3), (120, 150, 1e-4)]:
        assert all(lrs[e] == pytest.approx(v, rel=1e-12) for e in range(lo, hi))


def test_schedule_range_and_compression():
    with pytest.raises(ContractError):
        lr_schedule(150, TrainConfig())
    short = TrainConfig(epochs=15, compress_schedule=True)
    assert lr_schedule(0, short) == 1e-2
    assert lr_schedule(1, short) == pytest.approx(0.1)
    assert lr_schedule(14, short) == pytest.approx(1e-4)


# ---------------------------------------------------------------------- SGD


def _param(v, g):
    p = Tensor(np.array(v, dtype=np.float64), requires_grad=True)
    p.grad = np.array(g, dtype=np.float64)
    return p


def test_sgd_plain_step_to_zero():
    p = _param([1.5, -2.0], [1.5, -2.0])
    sgd_step([p], {}, lr=1.0, momentum=0.0)
    assert np.array_equal(p.data, [0.0, 0.0])


def test_sgd_zero_grad_decays_velocity():
    p = _param([1.0], [0.0])
    vel = {0: np.array([2.0])}
    sgd_step([p], vel, lr=0.0, momentum=0.5)
    assert vel[0][0] == 1.0 and p.data[0] == 1.0
    q = _param([3.0], [0.0])
    sgd_step([q], {}, lr=0.1, momentum=0.9)
    assert q.data[0] == 3.0


def test_sgd_three_step_recurrence():
    grads = [0.5, -1.0, 2.0]
    p_ref, v_ref = 1.0, 0.0
    for g in grads:
        v_ref = 0.9 * v_ref + g
        p_ref = p_ref - 0.1 * v_ref
    p, vel = _param([1.0], [0.0]), {}
    for g in grads:
        p.grad = np.array([g])
        sgd_step([p], vel, lr=0.1, momentum=0.9)
    assert p.data[0] == pytest.approx(p_ref, abs=1e-15)
    # by hand: v=0.5,p=.95; v=-0.55,p=1.005; v=1.505,p=0.8545
    assert p.data[0] == pytest.approx(0.8545, abs=1e-12)


def test_sgd_missing_grad():
    p = Tensor(np.zeros(2), requires_grad=True)
    with pytest.raises(ContractError):
        sgd_step([p], {}, 0.1, 0.9)


def test_clip_grad_norm():
    a, b = _param([0.0], [3.0]), _param([0.0, 0.0], [0.0, 4.0])
    assert clip_grad_norm([a, b], 10.0) == 5.0 and b.grad[1] == 4.0
    assert clip_grad_norm([a, b], 1.0) == 5.0
    assert math.hypot(a.grad[0], b.grad[1]) == pytest.approx(1.0)


# ----------------------------------------------------------------- augment


def test_geometry_options():
    assert FULL_SCALE_GEOMETRY == (3, 384, 144) and DESK_GEOMETRY == (3, 64, 32)
    img = np.random.default_rng(0).standard_normal((3, 64, 32)).astype(np.float32)
    assert resize_bilinear(img, FULL_SCALE_GEOMETRY[1:]).shape == FULL_SCALE_GEOMETRY


def test_resize_constant_and_identity():
    img = np.full((2, 5, 3), 0.7, np.float32)
    assert np.allclose(resize_bilinear(img, (11, 7)), 0.7)
    x = np.random.default_rng(1).standard_normal((1, 4, 4)).astype(np.float32)
    assert np.array_equal(resize_bilinear(x, (4, 4)), x)


def test_flip_involution_and_full_erase():
    img = np.random.default_rng(2).standard_normal((3, 6, 4))
    assert np.array_equal(hflip(hflip(img)), img)
    out = erase(img, 0, 0, 6, 4)
    assert np.allclose(out, img.mean(axis=(1, 2))[:, None, None])


def test_augment_deterministic_per_stream():
    img = np.random.default_rng(3).standard_normal((3, 20, 10)).astype(np.float32)
    cfg = AugmentConfig(out_hw=(16, 8))
    a = augment(img, np.random.default_rng([1, 2]), cfg)
    b = augment(img, np.random.default_rng([1, 2]), cfg)
    assert a.shape == (3, 16, 8) and np.array_equal(a, b)


# -------------------------------------------------------------------- loop


def test_zero_epochs_leaves_parameters(tiny_index, tmp_path):
    net = DeenNet(ModelConfig(**SMALL_MODEL, num_identities=8), seed=0)
    before = checkpoint_bytes(net)
    res = fit(net, tiny_index, small_train(epochs=0), tmp_path)
    assert res.steps == 0 and checkpoint_bytes(net) == before
    with open(tmp_path / "loss.csv") as fh:
        assert next(csv.reader(fh)) == LOSS_CSV_FIELDS


def test_fit_deterministic_and_logs(tiny_index, tmp_path):
    outs = []
    for k in range(2):
        net = DeenNet(ModelConfig(**SMALL_MODEL, num_identities=8), seed=0)
        res = fit(net, tiny_index, small_train(checkpoint_every=1), tmp_path / str(k))
        outs.append((tmp_path / str(k) / "checkpoint.deen").read_bytes())
        assert res.steps == 2 * steps_per_epoch(tiny_index, small_train())
        assert [p.name for p in res.checkpoints] == ["checkpoint_epoch001.deen", "checkpoint_epoch002.deen", "checkpoint.deen"]
    assert outs[0] == outs[1]
    assert (tmp_path / "0" / "loss.csv").read_bytes() == (tmp_path / "1" / "loss.csv").read_bytes()


def test_geometry_mismatch_rejected(tiny_index):
    net = DeenNet(ModelConfig(**SMALL_MODEL, num_identities=8))
    with pytest.raises(ConfigError):
        fit(net, tiny_index, small_train(augment=AugmentConfig(out_hw=(32, 16))))


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(epochs=-1).validate()
    with pytest.raises(ConfigError):
        TrainConfig(milestones=(60, 20, 120)).validate()
    with pytest.raises(ConfigError):
        TrainConfig(max_grad_norm=0.0).validate()


def test_baseline_config_reduces_to_ce_plus_triplet(tiny_index):
    from deen.losses import LossWeights

    net = DeenNet(ModelConfig(**SMALL_MODEL, num_identities=8, dee_stage=None, mfa_stages=()), seed=0)
    res = fit(net, tiny_index, small_train(epochs=1, weights=LossWeights(lambda1=0, lambda2=0)))
    for row in res.rows:
        assert row["L_cpm"] == 0 and row["L_ort"] == 0
        assert row["L_total"] == pytest.approx(row["L_ce"] + row["L_tri"], abs=1e-6)


def moving_average(xs, window):
    return [float(np.mean(xs[k:k + window])) for k in range(len(xs) - window + 1)]


def test_smoke_run_loss_moving_average_decreases():
    """First 20 steps of a toy run: each 10-step window average is below the one before it."""
    hw = (32, 16)
    ds = generate_dataset(SyntheticConfig(image_hw=hw, seed=0))
    net = DeenNet(ModelConfig(input_hw=hw, num_identities=len(ds.train_ids)), seed=0)
    cfg = TrainConfig(epochs=4, seed=0, augment=AugmentConfig(out_hw=hw))
    res = fit(net, ds.train_index, cfg)
    losses = [r["L_total"] for r in res.rows[:20]]
    assert len(losses) == 20
    ma = moving_average(losses, 10)
    assert all(b < a for a, b in zip(ma, ma[1:])), ma
