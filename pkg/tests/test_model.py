"""Pyramid encoder, level assignment, subimage pooling, EMA target."""
import numpy as np
import pytest

import mcl.model as M
import mcl.montage as mon
import mcl.nn as nn
import mcl.tensor as T
from mcl.seeding import SeededRng


def tiny_cfg(**kw):
    base = dict(stage_channels=(4, 8, 12, 16), pyramid_levels=3,
                pyramid_channels=8, head_depth=1, proj_hidden=16, embed_dim=8)
    base.update(kw)
    return M.NetConfig(**base)


def rand_batch(seed, b=4, size=32):
    g = np.random.default_rng(seed)
    return g.uniform(0, 1, (b, 3, size, size)).astype(np.float32)


# ---------------------------------------------------------------------------
# level assignment and momentum schedule


def test_assign_level_is_reversed_enumeration():
    assert [M.assign_level(s, 3) for s in range(3)] == [2, 1, 0]
    assert M.assign_level(0, 1) == 0
    assert [M.assign_level(s, 4) for s in range(4)] == [3, 2, 1, 0]


def test_assign_level_rejects_out_of_range():
    with pytest.raises(ValueError):
        M.assign_level(3, 3)
    with pytest.raises(ValueError):
        M.assign_level(-1, 3)


def test_momentum_schedule_endpoints_and_monotonicity():
    m0 = 0.99
    assert M.momentum_schedule(0, 100, m0) == m0
    assert M.momentum_schedule(100, 100, m0) == 1.0
    vals = [M.momentum_schedule(k, 100, m0) for k in range(101)]
    assert all(a <= b for a, b in zip(vals, vals[1:]))
    assert abs(M.momentum_schedule(50, 100, m0) - (1.0 - (1.0 - m0) / 2.0)) < 1e-12


# ---------------------------------------------------------------------------
# pyramid geometry


@pytest.mark.parametrize("fpn", [True, False])
def test_forward_pyramid_shapes_and_strides(fpn):
    cfg = tiny_cfg(fpn=fpn)
    net = M.PyramidEncoder(cfg, init=nn.InitStream(SeededRng(0)))
    x = T.Tensor(rand_batch(0, b=2, size=32))
    pyr = net.forward_pyramid(x)
    assert pyr.strides == [4, 8, 16]
    for mp, stride in zip(pyr.maps, pyr.strides):
        assert mp.shape == (2, cfg.pyramid_channels, 32 // stride, 32 // stride)
    # consecutive maps halve spatially, channel width is constant
    for a, b in zip(pyr.maps, pyr.maps[1:]):
        assert a.shape[2] == 2 * b.shape[2] and a.shape[1] == b.shape[1]


@pytest.mark.parametrize("fpn", [True, False])
@pytest.mark.parametrize("idx", [0, 1, 2])
def test_level_features_match_full_pyramid_plus_head(fpn, idx):
    cfg = tiny_cfg(fpn=fpn)
    net = M.PyramidEncoder(cfg, init=nn.InitStream(SeededRng(1)))
    x = T.Tensor(rand_batch(1, b=2, size=32))
    fast = net.level_features(x, idx)
    full = net.head(net.forward_pyramid(x).maps[idx])
    np.testing.assert_allclose(fast.data, full.data, rtol=1e-5, atol=1e-6)


def test_single_level_pyramid_uses_coarsest_stage():
    cfg = tiny_cfg(pyramid_levels=1)
    net = M.PyramidEncoder(cfg, init=nn.InitStream(SeededRng(2)))
    pyr = net.forward_pyramid(T.Tensor(rand_batch(2, b=2, size=32)))
    assert pyr.strides == [16]
    assert pyr.maps[0].shape[-1] == 2


def test_netconfig_rejects_too_many_levels():
    with pytest.raises(ValueError, match="stages"):
        tiny_cfg(pyramid_levels=5)


# ---------------------------------------------------------------------------
# subimage pooling


def test_pool_subimage_latents_rows_are_source_ordered():
    # constant-valued source images make pooled rows identifiable
    B, size = 16, 16
    batch = np.zeros((B, 3, size, size), dtype=np.float32)
    for i in range(B):
        batch[i] = i
    mb = mon.assemble(batch, 2, SeededRng(3))
    fmap = T.Tensor(mb.images[:, :1])  # single channel is enough
    rows = M.pool_subimage_latents(fmap, mb)
    np.testing.assert_allclose(rows.data[:, 0], np.arange(B), atol=1e-5)


def test_pool_subimage_latents_matches_region_loop():
    g = np.random.default_rng(4)
    batch = g.uniform(0, 1, (8, 3, 16, 16)).astype(np.float32)
    mb = mon.assemble(batch, 1, SeededRng(4))
    fmap = T.Tensor(g.standard_normal((mb.n_montages, 5, 8, 8)).astype(np.float32))
    rows = M.pool_subimage_latents(fmap, mb)
    boxes = mon.subimage_boxes(mb, 8, 8)
    for k, src in enumerate(mb.src_ids):
        m, rem = divmod(k, mb.grid ** 2)
        ref = T.region_avg_pool(T.Tensor(fmap.data[m]), boxes[rem])
        np.testing.assert_allclose(rows.data[src], ref.data, rtol=1e-5)


def test_pool_subimage_latents_rejects_mismatched_map():
    batch = np.zeros((8, 3, 16, 16), dtype=np.float32)
    mb = mon.assemble(batch, 1, SeededRng(5))
    with pytest.raises(ValueError, match="montage images"):
        M.pool_subimage_latents(T.Tensor(np.zeros((3, 4, 8, 8), dtype=np.float32)), mb)


# ---------------------------------------------------------------------------
# network pair and EMA


def test_target_starts_identical_and_frozen():
    nets = M.MclNetworks(tiny_cfg(), SeededRng(6))
    on = dict(nets.online_encoder.named_parameters())
    tg = dict(nets.target_encoder.named_parameters())
    assert on.keys() == tg.keys()
    for k in on:
        np.testing.assert_array_equal(on[k].data, tg[k].data)
        assert not tg[k].requires_grad


def test_ema_update_convex_combination():
    nets = M.MclNetworks(tiny_cfg(), SeededRng(7))
    before = {k: v.data.copy() for k, v in nets.target_encoder.named_parameters()}
    for p in nets.online_encoder.parameters():
        p.data += 1.0
    M.ema_update(nets, 0.75)
    for k, pt in nets.target_encoder.named_parameters():
        np.testing.assert_allclose(pt.data, 0.75 * before[k] + 0.25 * (before[k] + 1.0),
                                   rtol=1e-6)


def test_ema_update_m1_freezes_target():
    nets = M.MclNetworks(tiny_cfg(), SeededRng(8))
    before = {k: v.data.copy() for k, v in nets.target_encoder.named_parameters()}
    for p in nets.online_encoder.parameters():
        p.data += 2.0
    M.ema_update(nets, 1.0)
    for k, pt in nets.target_encoder.named_parameters():
        np.testing.assert_array_equal(pt.data, before[k])


def test_ema_update_tracks_running_stats_without_target_forward_updates():
    nets = M.MclNetworks(tiny_cfg(), SeededRng(9))
    batch = rand_batch(9, b=8, size=32)
    mb = mon.assemble(batch, 0, SeededRng(10))
    x = T.Tensor(mb.images)
    nets.encode_target(x, mb)  # target forward must not touch its stats
    bn = nets.target_encoder.backbone.stem.bn
    assert float(bn.batches_seen.data) == 0
    nets.encode_online(x, mb)  # online forward updates its own stats
    M.ema_update(nets, 0.5)
    on_bn = nets.online_encoder.backbone.stem.bn
    assert float(bn.batches_seen.data) == float(on_bn.batches_seen.data) == 1
    np.testing.assert_allclose(bn.running_mean.data, 0.5 * on_bn.running_mean.data,
                               rtol=1e-6)


def test_encode_online_shapes_and_gradient_isolation():
    nets = M.MclNetworks(tiny_cfg(), SeededRng(11))
    batch = rand_batch(11, b=8, size=32)
    mb = mon.assemble(batch, 1, SeededRng(12))
    x = T.Tensor(mb.images)
    with T.Tape() as tape:
        u = nets.encode_online(x, mb)
        v = nets.encode_target(x, mb)
        loss = T.tsum(T.mul(u, T.Tensor(np.ones_like(u.data))))
    assert u.shape == (8, tiny_cfg().embed_dim)
    assert v.shape == u.shape
    np.testing.assert_allclose(np.linalg.norm(u.data, axis=1), np.ones(8), rtol=1e-5)
    T.backward(loss, tape)
    assert any(p.grad is not None for p in nets.online_encoder.parameters())
    assert all(p.grad is None for p in nets.target_encoder.parameters())
