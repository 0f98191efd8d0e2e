import csv

import numpy as np
import pytest

from ctinterp.config import ConfigError
from ctinterp.flownet import FlowField, FlowNetConfig, init_flownet, interpolate
from ctinterp.numerics import Tape, Tensor, gradcheck, l1_loss, load_checkpoint, tv_regularizer
from ctinterp.phantom import generate, random_spec
from ctinterp.segmenter import UNetConfig, init_unet
from ctinterp.training import (
    FINETUNE_COLUMNS,
    PRETRAIN_COLUMNS,
    LossWeights,
    SkipSample,
    TrainConfig,
    TrainingDiverged,
    TripletSet,
    combined_loss,
    configs_from_kv,
    cycle_loss,
    drop_middle_samples,
    dvf_loss,
    finetune,
    pretrain,
    pseudo_supervised_loss,
    segmentation_loss,
    stack_triplets,
)
from ctinterp.phantom import degrade_thickness
from ctinterp.volume import window_normalize

SMALL = FlowNetConfig(encoder_channels=(4, 8, 8), bottleneck_channels=8)
SMALL_ZERO = FlowNetConfig(encoder_channels=(4, 8, 8), bottleneck_channels=8, zero_init_head=True)
TINY_UNET = UNetConfig(depth=2, base_channels=4)


def _triplet(n=2, h=16, w=16, seed=0, dtype=np.float32):
    rng = np.random.default_rng(seed)
    return [rng.random((n, 1, h, w)).astype(dtype) for _ in range(3)]


def _field(shape, seed, dtype=np.float32):
    rng = np.random.default_rng(seed)
    return FlowField(Tensor(rng.normal(0, 2, shape).astype(dtype)), Tensor(rng.normal(0, 2, shape).astype(dtype)),
                     Tensor(rng.random(shape).astype(dtype)))


# ---------------------------------------------------------------- configs


def test_loss_weight_invariants():
    with pytest.raises(ValueError):
        LossWeights(0, 0, 0)
    with pytest.raises(ValueError):
        LossWeights(-1, 1, 1)
    assert LossWeights() == LossWeights(1.0, 0.5, 1.0)


def test_train_config_invariants():
    with pytest.raises(ValueError):
        TrainConfig(lr=0)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    cfg = TrainConfig()
    assert (cfg.lr, cfg.batch_size, cfg.tv_motion, cfg.tv_mask) == (1e-4, 8, 1.0, 1.0)


def test_configs_from_kv():
    cfg, fcfg = configs_from_kv({"lr": "0.001", "lambda_seg": "0", "zero_init_head": "yes",
                                 "encoder_channels": "8,16,32"})
    assert cfg.lr == 1e-3 and cfg.loss_weights.lambda_seg == 0
    assert fcfg.zero_init_head and fcfg.encoder_channels == (8, 16, 32)
    with pytest.raises(ConfigError):
        configs_from_kv({"learning_rate": "1"})
    with pytest.raises(ConfigError):
        configs_from_kv({"lambda_cycle": "0", "lambda_seg": "0", "lambda_ps": "0"})


# ---------------------------------------------------------------- dvf loss


def test_dvf_loss_zero():
    s = np.random.default_rng(0).random((2, 1, 8, 8)).astype(np.float32)
    flow = FlowField(Tensor(np.full((2, 1, 8, 8), 1.5, np.float32)), Tensor(np.zeros((2, 1, 8, 8), np.float32)),
                     Tensor(np.full((2, 1, 8, 8), 0.3, np.float32)))
    assert float(dvf_loss(Tensor(s), s, flow).data) == 0.0


def test_dvf_loss_mask_only():
    s = np.random.default_rng(1).random((1, 1, 8, 8)).astype(np.float32)
    flow = _field((1, 1, 8, 8), 2)
    flow = FlowField(Tensor(np.zeros_like(flow.dx.data)), Tensor(np.zeros_like(flow.dy.data)), flow.mask)
    expect = float(tv_regularizer(flow.mask, "mean").data)
    assert float(dvf_loss(Tensor(s), s, flow).data) == pytest.approx(expect, rel=1e-6)


def test_dvf_loss_decomposition():
    rng = np.random.default_rng(3)
    a, b = rng.random((2, 1, 8, 8)).astype(np.float32), rng.random((2, 1, 8, 8)).astype(np.float32)
    flow = _field((2, 1, 8, 8), 4)
    parts = (float(l1_loss(Tensor(a), Tensor(b)).data), float(tv_regularizer(flow.motion(), "mean").data),
             float(tv_regularizer(flow.mask, "mean").data))
    assert float(dvf_loss(Tensor(a), b, flow, 0.3, 2.0).data) == pytest.approx(
        parts[0] + 0.3 * parts[1] + 2.0 * parts[2], rel=1e-6)


def test_dvf_loss_shape_error():
    with pytest.raises(ValueError):
        dvf_loss(Tensor(np.zeros((1, 1, 8, 8))), np.zeros((1, 1, 4, 4)), _field((1, 1, 8, 8), 0))


@pytest.mark.gradcheck
def test_dvf_loss_gradcheck():
    s0, _, s2 = _triplet(1, 8, 8, seed=5, dtype=np.float64)
    gt = _triplet(1, 8, 8, seed=6, dtype=np.float64)[1]
    p = init_flownet(SMALL, 5)

    def f(q):
        out, flow = interpolate(q, Tensor(s0), Tensor(s2), 0.5, SMALL)
        return dvf_loss(out, Tensor(gt), flow, 0.5, 0.5)

    rep = gradcheck(f, p, eps=1e-5, tol=1e-2)
    assert rep.ok, rep.max_rel_error


# ---------------------------------------------------------------- cycle / pseudo-supervised


def test_cycle_loss_constant_triplet_zero():
    p = init_flownet(SMALL_ZERO, 0)
    c = np.full((2, 1, 16, 16), 0.37, np.float32)
    res = cycle_loss(p, c, c, c, SMALL_ZERO)
    assert float(res.loss.data) == 0.0
    assert res.s1.shape == res.s05.shape == res.s15.shape == (2, 1, 16, 16)


def test_cycle_loss_nonnegative_and_nested_gradients():
    p = init_flownet(SMALL, 1)
    s0, s1, s2 = _triplet(seed=1)
    with Tape() as tape:
        res = cycle_loss(p, s0, s1, s2, SMALL)
    assert float(res.loss.data) >= 0
    tape.backward(res.loss)
    assert all(v > 0 for v in p.grad_norms().values())


@pytest.mark.gradcheck
def test_cycle_loss_gradcheck():
    s0, s1, s2 = _triplet(1, 8, 8, seed=7, dtype=np.float64)
    p = init_flownet(SMALL, 7)
    rep = gradcheck(lambda q: cycle_loss(q, Tensor(s0), Tensor(s1), Tensor(s2), SMALL).loss, p,
                    eps=1e-5, tol=1e-2)
    assert rep.ok, rep.max_rel_error


def test_pseudo_supervised_copy_is_zero():
    pre = init_flownet(SMALL, 2)
    s0, s1, s2 = _triplet(seed=2)
    assert float(pseudo_supervised_loss(pre.copy(), pre, s0, s1, s2, SMALL).data) == 0.0


def test_pseudo_supervised_is_sum_of_terms():
    pre, g = init_flownet(SMALL, 2), init_flownet(SMALL, 3)
    s0, s1, s2 = _triplet(seed=3)
    o05, _ = interpolate(g, s0, s1, 0.5, SMALL)
    o15, _ = interpolate(g, s1, s2, 0.5, SMALL)
    t05, _ = interpolate(pre, s0, s1, 0.5, SMALL)
    t15, _ = interpolate(pre, s1, s2, 0.5, SMALL)
    first = float(l1_loss(o05, t05).data)
    second = float(l1_loss(o15, t15).data)
    value = float(pseudo_supervised_loss(g, pre, s0, s1, s2, SMALL).data)
    assert value == pytest.approx(first + second, rel=1e-5)
    assert value == pytest.approx(second + first, rel=1e-5)


def test_pseudo_supervised_isolates_teacher():
    pre, g = init_flownet(SMALL, 2), init_flownet(SMALL, 3)
    before = pre.copy()
    s0, s1, s2 = _triplet(seed=4)
    with Tape() as tape:
        loss = pseudo_supervised_loss(g, pre, s0, s1, s2, SMALL)
    tape.backward(loss)
    assert all(np.all(t.grad == 0) for _, t in pre.items())
    assert any(np.any(t.grad != 0) for _, t in g.items())
    assert pre.equal(before)


# ---------------------------------------------------------------- segmentation term


def test_segmentation_loss_range_isolation_and_skip():
    seg = init_unet(TINY_UNET, 0)
    g = init_flownet(SMALL, 0)
    s0, s1, s2 = _triplet(seed=5)
    labels = np.random.default_rng(0).integers(0, 3, (2, 16, 16))
    with Tape() as tape:
        res = cycle_loss(g, s0, s1, s2, SMALL)
        loss = segmentation_loss(seg, res.s1, labels, TINY_UNET)
    assert 0.0 <= float(loss.data) <= 1.0
    tape.backward(loss)
    assert all(np.all(t.grad == 0) for _, t in seg.items())
    assert any(np.any(t.grad != 0) for _, t in g.items())
    with pytest.raises(SkipSample):
        segmentation_loss(seg, res.s1, None, TINY_UNET)


# ---------------------------------------------------------------- combined


def _batch(seed=0):
    s0, s1, s2 = (x[:, 0] for x in _triplet(seed=seed))
    return TripletSet(s0, s1, s2, np.random.default_rng(seed).integers(0, 3, (2, 16, 16)))


def test_combined_cycle_only():
    g = init_flownet(SMALL, 1)
    b = _batch()
    terms = combined_loss(g, None, None, b, LossWeights(1, 0, 0), SMALL)
    assert float(terms.total.data) == float(cycle_loss(g, b.s0, b.s1, b.s2, SMALL).loss.data)
    assert terms.l_seg == 0.0 and terms.l_ps == 0.0


def test_combined_equals_sum_of_terms():
    g, pre, seg = init_flownet(SMALL, 1), init_flownet(SMALL, 2), init_unet(TINY_UNET, 3)
    b = _batch(1)
    terms = combined_loss(g, pre, seg, b, LossWeights(1, 1, 1), SMALL, TINY_UNET)
    cyc = cycle_loss(g, b.s0, b.s1, b.s2, SMALL)
    ps = float(pseudo_supervised_loss(g, pre, b.s0, b.s1, b.s2, SMALL).data)
    sg = float(segmentation_loss(seg, cyc.s1, b.labels, TINY_UNET).data)
    assert abs(float(terms.total.data) - (float(cyc.loss.data) + ps + sg)) < 1e-6
    assert (terms.l_cycle, terms.l_ps, terms.l_seg) == pytest.approx((float(cyc.loss.data), ps, sg), rel=1e-6)


@pytest.mark.gradcheck
def test_combined_gradcheck():
    g, pre, seg = init_flownet(SMALL, 1), init_flownet(SMALL, 2), init_unet(TINY_UNET, 3)
    s0, s1, s2 = (x.astype(np.float64) for x in _triplet(1, 8, 8, seed=8))
    labels = np.random.default_rng(8).integers(0, 3, (1, 8, 8))
    pre64, seg64 = pre.copy(np.float64), seg.copy(np.float64)

    def f(q):
        b = TripletSet(Tensor(s0), Tensor(s1), Tensor(s2), labels)
        return combined_loss(q, pre64, seg64, b, LossWeights(1, 0.5, 1), SMALL, TINY_UNET).total

    rep = gradcheck(f, g, eps=1e-5, tol=1e-2)
    assert rep.ok, rep.max_rel_error


# ---------------------------------------------------------------- loops


@pytest.fixture(scope="module")
def thin_phantoms():
    out = [generate(random_spec(s, grid=(31, 32, 32), lesion_radius=(2.5, 4.0))) for s in (11, 12, 13)]
    return [window_normalize(v) for v, _ in out], [s for _, s in out]


def test_pretrain_decreases_and_is_deterministic(thin_phantoms, tmp_path):
    vols, segs = thin_phantoms
    data = drop_middle_samples(vols, segs, (2,))
    data = data.subset(np.arange(200) % len(data))
    assert len(data) == 200
    cfg = TrainConfig(lr=1e-3, epochs=5, batch_size=20, seed=4, tv_motion=0.01, tv_mask=0.01)
    val = drop_middle_samples(vols[:1], segs[:1], (2,))
    r1 = pretrain(data, cfg, SMALL_ZERO, val, tmp_path / "a.ifck", tmp_path / "a.csv")
    epoch_loss = [np.mean([r["total"] for r in r1.rows if r["epoch"] == e]) for e in range(5)]
    assert epoch_loss[-1] < epoch_loss[0], epoch_loss
    r2 = pretrain(data, cfg, SMALL_ZERO, val, tmp_path / "b.ifck", tmp_path / "b.csv")
    assert (tmp_path / "a.ifck").read_bytes() == (tmp_path / "b.ifck").read_bytes()
    assert (tmp_path / "a.csv").read_text() == (tmp_path / "b.csv").read_text()
    rows = list(csv.DictReader(open(tmp_path / "a.csv")))
    assert tuple(rows[0].keys()) == PRETRAIN_COLUMNS and len(rows) == len(r1.rows) == len(r2.rows)
    assert all(r["l_dvf"] for r in rows)


def test_pretrain_divergence_and_empty():
    a = np.zeros((4, 16, 16), np.float32)
    a[0, 0, 0] = np.nan
    from ctinterp.training import DropMiddleSet

    bad = DropMiddleSet(a, a.copy(), a.copy(), np.full(4, 0.5, np.float32))
    with pytest.raises(TrainingDiverged, match="diverged at step 0"):
        pretrain(bad, TrainConfig(epochs=1, batch_size=2), SMALL)
    with pytest.raises(ValueError):
        pretrain(bad.subset(np.arange(0)), TrainConfig(epochs=1), SMALL)


def test_finetune_contract(thin_phantoms, tmp_path):
    vols, segs = thin_phantoms
    thick = [degrade_thickness(v, s, 2) for v, s in zip(vols, segs)]
    data = stack_triplets([t for t, _ in thick], [s for _, s in thick])
    data = data.subset(np.arange(12))
    pre = init_flownet(SMALL, 9)
    seg = init_unet(TINY_UNET, 9)
    pre_before, seg_before = pre.copy(), seg.copy()
    cfg = TrainConfig(lr=1e-3, epochs=2, batch_size=4, seed=1)
    r1 = finetune(data, pre, seg, cfg, SMALL, TINY_UNET, None, tmp_path / "a.ifck", tmp_path / "a.csv")
    assert r1.rows[0]["l_ps"] == 0.0  # G starts as a copy of G_pre
    assert pre.equal(pre_before) and seg.equal(seg_before)
    finetune(data, pre, seg, cfg, SMALL, TINY_UNET, None, tmp_path / "b.ifck", tmp_path / "b.csv")
    assert (tmp_path / "a.ifck").read_bytes() == (tmp_path / "b.ifck").read_bytes()
    rows = list(csv.DictReader(open(tmp_path / "a.csv")))
    assert tuple(rows[0].keys()) == FINETUNE_COLUMNS
    assert len(rows) == 6 and all(r["l_cycle"] and r["l_ps"] and r["l_seg"] and r["total"] for r in rows)
    assert load_checkpoint(tmp_path / "a.ifck").equal(r1.params)

    noseg = TrainConfig(lr=1e-3, epochs=1, batch_size=4, seed=1, loss_weights=LossWeights(1, 0, 1))
    r3 = finetune(data, pre, None, noseg, SMALL, None, None, None, tmp_path / "c.csv")
    assert all(r["l_seg"] == 0.0 for r in r3.rows)
    assert all(float(r["l_seg"]) == 0.0 for r in csv.DictReader(open(tmp_path / "c.csv")))


def test_finetune_rejects_mismatched_teacher(thin_phantoms):
    vols, segs = thin_phantoms
    data = stack_triplets(vols[:1], segs[:1])
    other = init_flownet(FlowNetConfig(encoder_channels=(4, 8, 16), bottleneck_channels=8), 0)
    with pytest.raises(ValueError, match="enc3"):
        finetune(data, other, None, TrainConfig(epochs=1, loss_weights=LossWeights(1, 0, 1)), SMALL)
