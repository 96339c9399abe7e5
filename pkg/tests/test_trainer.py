import csv
import dataclasses
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from bbsnet.backbone import BackboneConfig
from bbsnet.data_io import RgbdSample
from bbsnet.model import ModelConfig, build_variant
from bbsnet.synthetic import generate_corpus
from bbsnet import trainer as T

TOY = ModelConfig(backbone=BackboneConfig(kind="toy"))


def toy(seed=0, tag="BBS_RL"):
    torch.manual_seed(seed)
    return build_variant(tag, TOY)


def quick(**kw):
    base = dict(lr=1e-3, decay_every=None, epochs=2, batch=4, side=32, augment=False)
    base.update(kw)
    return T.TrainConfig(**base)


def test_defaults():
    cfg = T.TrainConfig()
    assert (cfg.lr, cfg.decay_every, cfg.decay_factor, cfg.epochs, cfg.batch) == (1e-4, 60, 10.0, 150, 10)
    assert cfg.clip == 0.5 and cfg.betas == (0.9, 0.99) and cfg.weight_decay == 0 and cfg.side == 352
    assert cfg.loss_alpha == 0.5
    with pytest.raises(ValueError):
        T.TrainConfig(lr=0)
    with pytest.raises(ValueError):
        T.TrainConfig(loss_alpha=1.5)


@pytest.mark.parametrize("epoch,lr", [(0, 1e-4), (59, 1e-4), (60, 1e-5), (119, 1e-5), (120, 1e-6), (149, 1e-6)])
def test_lr_schedule(epoch, lr):
    assert T.lr_at(epoch, T.TrainConfig()) == pytest.approx(lr, rel=1e-12)


def test_lr_schedule_disabled():
    assert T.lr_at(500, T.TrainConfig(decay_every=None)) == 1e-4


def test_clip_examples():
    g = torch.tensor([0.7, -2.0, 0.1, 0.5, -0.5])
    T.clip_gradients(g)
    assert g.tolist() == pytest.approx([0.5, -0.5, 0.1, 0.5, -0.5])
    grads = [torch.tensor([3.0]), None, torch.tensor([-0.2])]
    out = T.clip_gradients(grads, -1, 1)
    assert out[0].item() == 1 and out[1] is None and out[2].item() == pytest.approx(-0.2)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-10, 10, allow_nan=False), min_size=1, max_size=30))
def test_clip_property(values):
    g = torch.tensor(values, dtype=torch.float64)
    c = T.clip_gradients(g.clone())
    assert (c.abs() <= 0.5).all()
    inside = g.abs() <= 0.5
    assert torch.equal(c[inside], g[inside])


def _sample(side=32, seed=0):
    return generate_corpus(1, side, "near", seed=seed)[0]


def test_double_flip_is_identity():
    s = _sample()
    once = T.apply_transform(s, True, 0.0, None)
    assert not np.array_equal(once.rgb, s.rgb)
    twice = T.apply_transform(once, True, 0.0, None)
    for a, b in ((twice.rgb, s.rgb), (twice.depth, s.depth), (twice.gt, s.gt)):
        assert np.array_equal(a, b)


def test_augmented_gt_stays_binary_and_deterministic():
    s = _sample(48)
    cfg = T.TrainConfig(side=48)
    for seed in range(10):
        a = T.augment(s, np.random.default_rng(seed), cfg)
        b = T.augment(s, np.random.default_rng(seed), cfg)
        assert set(np.unique(a.gt)) <= {0.0, 1.0}
        assert a.gt.shape == s.gt.shape and a.rgb.shape == s.rgb.shape and a.depth.shape == s.depth.shape
        assert np.array_equal(a.rgb, b.rgb) and np.array_equal(a.gt, b.gt) and np.array_equal(a.depth, b.depth)


def test_augmentation_keeps_maps_in_sync():
    # the same coordinate grid in all three maps must come out identical (gt up to nearest vs bilinear)
    side = 40
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float32)
    code = (yy * side + xx) / (side * side)
    blocks = ((yy // 8 + xx // 8) % 2).astype(np.float32)
    s = RgbdSample("grid", np.stack([code, code, blocks], -1), code[..., None], blocks[..., None])
    cfg = T.TrainConfig(side=side, rotate_deg=15.0, crop_frac=0.1)
    for seed in range(8):
        a = T.augment(s, np.random.default_rng(seed), cfg)
        np.testing.assert_array_equal(a.rgb[..., 0], a.depth[..., 0])
        # away from block edges, bilinear and nearest agree on a piecewise-constant pattern
        soft = a.rgb[..., 2]
        solid = (soft < 0.01) | (soft > 0.99)
        assert solid.mean() > 0.5
        np.testing.assert_array_equal(a.gt[..., 0][solid], np.rint(soft[solid]))


def test_augmentation_crop_bounded():
    s = _sample(50)
    cfg = T.TrainConfig(side=50, flip=False, rotate_deg=0.0, crop_frac=0.1)
    rng = np.random.default_rng(0)
    for _ in range(20):
        a = T.augment(s, rng, cfg)
        assert a.rgb.shape == s.rgb.shape


def test_training_is_deterministic():
    samples = generate_corpus(8, 32, "near", seed=1)
    a, b = toy(), toy()
    ra = T.train(a, samples, quick(augment=True))
    rb = T.train(b, samples, quick(augment=True))
    assert ra.history == rb.history
    for p, q in zip(a.state_dict().values(), b.state_dict().values()):
        assert torch.equal(p, q)


def test_resume_matches_uninterrupted(tmp_path):
    samples = generate_corpus(8, 32, "near", seed=2)
    full = toy(3)
    T.train(full, samples, quick(epochs=3, augment=True))
    part = toy(3)
    res = T.train(part, samples, quick(epochs=1, augment=True), out_dir=str(tmp_path))
    resumed = toy(99)  # different init: everything must come from the checkpoint
    T.train(resumed, samples, quick(epochs=3, augment=True), resume=res.checkpoints[-1])
    for (k, p), q in zip(full.state_dict().items(), resumed.state_dict().values()):
        assert torch.equal(p, q), k


def test_log_and_checkpoints(tmp_path):
    samples = generate_corpus(4, 32, "near", seed=3)
    res = T.train(toy(), samples, quick(epochs=2), out_dir=str(tmp_path))
    assert len(res.checkpoints) == 2
    with open(tmp_path / "train_log.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["epoch", "iter", "loss_s1", "loss_s2", "lr"]
    assert len(rows) == 1 + len(res.history)
    assert float(rows[-1][4]) == 1e-3


def test_losses_decrease_over_first_50_iterations():
    samples = generate_corpus(8, 32, "near", seed=4)
    res = T.train(toy(4), samples, quick(epochs=50, batch=8, loss_alpha=0.5))
    assert len(res.history) == 50
    for col in (2, 3):
        ma = T.moving_average([r[col] for r in res.history], 5)
        assert ma[-1] < 0.6 * ma[0]
        # downward in trend: negative rank correlation with time
        ranks = np.argsort(np.argsort(ma))
        assert np.corrcoef(ranks, np.arange(len(ma)))[0, 1] < -0.8


def _adam_step_bound(t, b1=0.9, b2=0.99):
    # |m_hat / sqrt(v_hat)| by Cauchy-Schwarz on the moment sums
    geo = sum((b1 * b1 / b2) ** k for k in range(t))
    return (1 - b1) * math.sqrt(1 - b2 ** t) / ((1 - b1 ** t) * math.sqrt(1 - b2)) * math.sqrt(geo)


def test_updates_bounded_and_gradients_clipped():
    samples = generate_corpus(8, 32, "near", seed=5)
    net = toy(5)
    cfg = quick(epochs=6, batch=8, clip=1e-3, lr=1e-2)
    prev = [p.detach().clone() for p in net.parameters()]
    seen = {"clipped": False}

    def check(model, row):
        t = row[1]
        bound = cfg.lr * _adam_step_bound(t) * (1 + 1e-6)
        for p, q in zip(model.parameters(), prev):
            assert (p.grad.abs() <= cfg.clip).all()
            seen["clipped"] |= bool((p.grad.abs() == cfg.clip).any())
            assert (p.detach() - q).abs().max().item() <= bound
            q.copy_(p.detach())

    T.train(net, samples, cfg, callback=check)
    assert seen["clipped"]
    assert _adam_step_bound(1) == pytest.approx(1.0)


def test_divergence_restores_last_good(tmp_path):
    samples = generate_corpus(4, 32, "near", seed=6)
    net = toy(6)

    def poison(model, row):
        if row[0] == 1:
            with torch.no_grad():
                next(model.parameters()).fill_(float("nan"))

    with pytest.raises(T.DivergenceError) as err:
        T.train(net, samples, quick(epochs=3, batch=4), out_dir=str(tmp_path), callback=poison)
    assert err.value.last_good.endswith("epoch_0000.ckpt")
    assert all(torch.isfinite(p).all() for p in net.parameters())


def test_empty_split():
    with pytest.raises(ValueError):
        T.train(toy(), [], quick())


def test_weight_decay_and_config_dict():
    cfg = quick(weight_decay=1e-4)
    d = cfg.to_dict()
    assert d["weight_decay"] == 1e-4 and d["betas"] == (0.9, 0.99)
    assert T.TrainConfig(**d) == cfg
    assert dataclasses.replace(cfg, lr=2e-3).lr == 2e-3
