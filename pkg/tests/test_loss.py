"""Contrastive loss: pairing rules, closed forms, dual-route equality."""
import itertools
import math

import numpy as np
import pytest

import mcl.loss as L
import mcl.tensor as T


def t64(a, rg=False):
    return T.Tensor(np.asarray(a, dtype=np.float64), requires_grad=rg)


# ---------------------------------------------------------------------------
# pairing rules


def test_pair_levels_mode_a_targets_full_size_scale():
    assert L.pair_levels("a", 1) == [(0, 0)]
    assert L.pair_levels("a", 3) == [(0, 0), (1, 0), (2, 0)]
    assert L.pair_levels("a", 4) == [(0, 0), (1, 0), (2, 0), (3, 0)]


def test_pair_levels_mode_b_is_diagonal():
    for n in range(1, 5):
        assert L.pair_levels("b", n) == [(q, q) for q in range(n)]


def test_pair_levels_mode_c_adjacent_band():
    assert L.pair_levels("c", 1) == [(0, 0)]
    assert L.pair_levels("c", 3) == [(0, 0), (0, 1), (1, 0), (1, 1), (1, 2), (2, 1), (2, 2)]
    assert L.pair_levels("c", 3, adjacent_include_self=False) == \
        [(0, 1), (1, 0), (1, 2), (2, 1)]


def test_pair_levels_mode_d_is_full_product():
    for n in range(1, 5):
        assert L.pair_levels("d", n) == sorted(itertools.product(range(n), repeat=2))
        assert len(L.pair_levels("d", n)) == n * n


def test_pair_levels_rejects_bad_args():
    with pytest.raises(ValueError, match="matching mode"):
        L.pair_levels("e", 3)
    with pytest.raises(ValueError, match="at least one"):
        L.pair_levels("a", 0)


def test_target_scales_per_mode():
    assert L.target_scales("a", 3) == [0]
    assert L.target_scales("b", 3) == [0, 1, 2]
    assert L.target_scales("c", 3) == [0, 1, 2]
    assert L.target_scales("d", 1) == [0]


# ---------------------------------------------------------------------------
# info_nce


@pytest.mark.parametrize("k", [1, 3, 7, 63])
def test_info_nce_uniform_logits_closed_form(k):
    # positive and negatives all equal: loss is ln(K + 1) for any tau
    d = 4
    u = t64(np.eye(d)[0])
    v = t64(np.eye(d)[0] * 0.7)
    negs = t64(np.tile(v.data, (k, 1)))
    out = L.info_nce(u, v, negs, tau=0.2)
    np.testing.assert_allclose(out.item(), math.log(k + 1), rtol=1e-12)


def test_info_nce_hand_case():
    # u.v+ = 0.9, u.negs = (0.1, -0.3), tau = 0.2 -> logits (4.5, 0.5, -1.5)
    # loss = ln(1 + e^-4 + e^-6) = 0.02058113894732916
    u = t64([1.0, 0.0])
    v = t64([0.9, 0.0])
    negs = t64([[0.1, 0.0], [-0.3, 5.0]])
    out = L.info_nce(u, v, negs, tau=0.2)
    np.testing.assert_allclose(out.item(), 0.02058113894732916, atol=1e-12)


def test_info_nce_no_negatives_is_zero_and_flagged():
    u = t64([1.0, 0.0])
    with pytest.warns(RuntimeWarning, match="no negatives"):
        out = L.info_nce(u, u, t64(np.zeros((0, 2))), tau=0.2)
    assert out.item() == 0.0


def test_info_nce_stable_for_extreme_similarity_scale():
    u = t64([100.0, 0.0])
    v = t64([100.0, 0.0])
    negs = t64([[-100.0, 0.0]])
    out = L.info_nce(u, v, negs, tau=0.01)
    assert np.isfinite(out.item())
    np.testing.assert_allclose(out.item(), 0.0, atol=1e-12)


def test_info_nce_gradients():
    g = np.random.default_rng(0)
    u = t64(g.standard_normal(5), rg=True)
    v = t64(g.standard_normal(5), rg=True)
    negs = t64(g.standard_normal((3, 5)), rg=True)

    def f():
        return L.info_nce(u, v, negs, tau=0.3)

    assert T.finite_diff_check(f, [u, v, negs]) < 5e-6


# ---------------------------------------------------------------------------
# level_pair_loss


def test_level_pair_loss_equals_mean_of_per_row_info_nce():
    g = np.random.default_rng(1)
    b, d = 6, 4
    u = g.standard_normal((b, d))
    v = g.standard_normal((b, d))
    fused = L.level_pair_loss(t64(u), t64(v), tau=0.2).item()
    per_row = []
    for i in range(b):
        negs = np.delete(v, i, axis=0)
        per_row.append(L.info_nce(t64(u[i]), t64(v[i]), t64(negs), tau=0.2).item())
    np.testing.assert_allclose(fused, np.mean(per_row), rtol=1e-12)


@pytest.mark.parametrize("b", [2, 4, 8, 64])
def test_level_pair_loss_identical_rows_closed_form(b):
    u = t64(np.tile([1.0, 0.0], (b, 1)))
    out = L.level_pair_loss(u, u, tau=0.2)
    np.testing.assert_allclose(out.item(), math.log(b), rtol=1e-12)


def test_level_pair_loss_orthonormal_pair_closed_form():
    # identity cosine matrix at tau=1: every row -log(e / (e + (B-1)))
    u = t64(np.eye(2))
    out = L.level_pair_loss(u, u, tau=1.0)
    np.testing.assert_allclose(out.item(), math.log(1.0 + math.exp(-1.0)), rtol=1e-12)


def test_level_pair_loss_rejects_tiny_batch():
    u = t64(np.ones((1, 3)))
    with pytest.raises(ValueError, match="at least 2"):
        L.level_pair_loss(u, u, tau=0.2)


def test_level_pair_loss_gradients():
    g = np.random.default_rng(2)
    u = t64(g.standard_normal((4, 3)), rg=True)
    v = t64(g.standard_normal((4, 3)), rg=True)

    def f():
        return L.level_pair_loss(u, v, tau=0.5)

    assert T.finite_diff_check(f, [u, v]) < 5e-6


# ---------------------------------------------------------------------------
# total_loss


def unit_rows(g, b, d):
    x = g.standard_normal((b, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def make_views(seed, n_scales, b=6, d=4):
    g = np.random.default_rng(seed)
    mk = lambda: {s: t64(unit_rows(g, b, d)) for s in range(n_scales)}
    return L.ViewLatents(online=mk(), target=mk()), L.ViewLatents(online=mk(), target=mk())


@pytest.mark.parametrize("mode", ["a", "b", "c", "d"])
def test_total_loss_matches_direct_sum(mode):
    n = 3
    v1, v2 = make_views(3, n)
    cfg = L.LossConfig(tau=0.2, mode=mode)
    out, per_level, diag = L.total_loss(v1, v2, n, cfg)
    w = L.default_level_weights(n)
    expect = 0.0
    for q, t in L.pair_levels(mode, n):
        expect += w[q] * L.level_pair_loss(v1.online[q], v2.target[t], 0.2).item()
        expect += w[q] * L.level_pair_loss(v2.online[q], v1.target[t], 0.2).item()
    np.testing.assert_allclose(out.item(), expect, rtol=1e-12)
    np.testing.assert_allclose(sum(per_level.values()), expect, rtol=1e-12)


def test_total_loss_custom_weights_and_default_halving():
    assert L.default_level_weights(3) == (0.5, 0.25, 0.125)
    v1, v2 = make_views(4, 2)
    cfg = L.LossConfig(mode="b", level_weights=(1.0, 0.0))
    out, per_level, _ = L.total_loss(v1, v2, 2, cfg)
    assert per_level[1] == 0.0
    direct = L.level_pair_loss(v1.online[0], v2.target[0], 0.2).item() \
        + L.level_pair_loss(v2.online[0], v1.target[0], 0.2).item()
    np.testing.assert_allclose(out.item(), direct, rtol=1e-12)


def test_total_loss_missing_scale_raises():
    v1, v2 = make_views(5, 2)
    del v2.target[0]
    with pytest.raises(KeyError, match="target scale 0"):
        L.total_loss(v1, v2, 2, L.LossConfig(mode="a"))


def test_total_loss_diagnostics_cosines():
    b, d = 4, 8
    rows = np.eye(d)[:b]
    ident = {0: t64(rows)}
    v1 = L.ViewLatents(online=dict(ident), target=dict(ident))
    v2 = L.ViewLatents(online=dict(ident), target=dict(ident))
    _, _, diag = L.total_loss(v1, v2, 1, L.LossConfig(mode="a"))
    np.testing.assert_allclose(diag["pos_cos"], 1.0, atol=1e-12)
    np.testing.assert_allclose(diag["neg_cos"], 0.0, atol=1e-12)


def test_total_loss_gradients_flow_to_online_only():
    g = np.random.default_rng(6)
    n, b, d = 2, 4, 3
    online1 = {s: t64(unit_rows(g, b, d), rg=True) for s in range(n)}
    target1 = {s: t64(unit_rows(g, b, d)) for s in range(n)}
    online2 = {s: t64(unit_rows(g, b, d), rg=True) for s in range(n)}
    target2 = {s: t64(unit_rows(g, b, d)) for s in range(n)}
    v1 = L.ViewLatents(online=online1, target=target1)
    v2 = L.ViewLatents(online=online2, target=target2)
    params = list(online1.values()) + list(online2.values())

    def f():
        out, _, _ = L.total_loss(v1, v2, n, L.LossConfig(mode="d", tau=0.4))
        return out

    assert T.finite_diff_check(f, params) < 5e-6


def test_total_loss_invariant_under_global_latent_rotation():
    n, b, d = 2, 5, 6
    v1, v2 = make_views(7, n, b=b, d=d)
    cfg = L.LossConfig(mode="d")
    base, _, _ = L.total_loss(v1, v2, n, cfg)
    q, _ = np.linalg.qr(np.random.default_rng(8).standard_normal((d, d)))

    def rot(views):
        return L.ViewLatents(
            online={s: t64(t.data @ q) for s, t in views.online.items()},
            target={s: t64(t.data @ q) for s, t in views.target.items()})

    rotated, _, _ = L.total_loss(rot(v1), rot(v2), n, cfg)
    np.testing.assert_allclose(rotated.item(), base.item(), atol=1e-5)
