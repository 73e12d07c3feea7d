"""Finite-difference verification of the differentiable operators.

Runs every check in float64 against central differences and reports the
worst relative error per operator. Primitive kernels must sit near
machine-precision of the difference quotient; the composite losses get
a looser bound because error compounds through the network.
"""
from __future__ import annotations

import numpy as np

from . import loss as L
from . import model as M
from . import nn
from . import supervised as sup
from . import tensor as T
from .seeding import SeededRng

PRIMITIVE_TOL = 5e-6
COMPOSITE_TOL = 1e-4


def _t(rng, shape):
    return T.Tensor(rng.standard_normal(shape), requires_grad=True)


def _checks():
    rng = np.random.default_rng(1234)

    x = _t(rng, (2, 3, 6, 6))
    w = _t(rng, (4, 3, 3, 3))
    b = _t(rng, (4,))
    yield "conv2d", lambda: T.tsum(T.conv2d(x, w, b, stride=2, pad=1)), \
        [x, w, b], PRIMITIVE_TOL

    xb = _t(rng, (5, 4))
    gam = _t(rng, (4,))
    bet = _t(rng, (4,))
    # the mix matrix breaks the batch-moment invariances that would
    # otherwise make the objective constant in xb
    mix = T.Tensor(rng.standard_normal((5, 4)))

    def bn_mix():
        out = T.batchnorm_train(xb, gam, bet)[0]
        return T.tsum(T.mul(out, mix))

    yield "batchnorm_train", bn_mix, [xb, gam, bet], PRIMITIVE_TOL

    xr = _t(rng, (1, 2, 4, 4))
    yield "bilinear_resize", lambda: T.tsum(T.bilinear_resize(xr, 6, 3)), \
        [xr], PRIMITIVE_TOL

    xp = _t(rng, (2, 3, 4, 4))
    yield "grid_avg_pool+l2", \
        lambda: T.tsum(T.l2_normalize(T.grid_avg_pool(xp, 2))), \
        [xp], PRIMITIVE_TOL

    logits = _t(rng, (6, 4))
    labels = rng.integers(0, 4, size=6)
    yield "softmax_cross_entropy", \
        lambda: T.softmax_cross_entropy(logits, labels), [logits], PRIMITIVE_TOL

    u = _t(rng, (5, 3))
    v = _t(rng, (5, 3))
    yield "level_pair_loss", lambda: L.level_pair_loss(
        T.l2_normalize(u), T.l2_normalize(v), 0.2), [u, v], COMPOSITE_TOL

    raw = {s: (_t(rng, (4, 3)), _t(rng, (4, 3))) for s in range(2)}

    def contrastive():
        views = []
        for side in (0, 1):
            online = {s: T.l2_normalize(raw[s][side]) for s in raw}
            target = {s: T.l2_normalize(raw[s][1 - side]) for s in raw}
            views.append(L.ViewLatents(online=online, target=target))
        return L.total_loss(views[0], views[1], 2, L.LossConfig(mode="d"))[0]

    yield "total_loss", contrastive, \
        [t for pair in raw.values() for t in pair], COMPOSITE_TOL

    feats = [_t(rng, (6, 4)), _t(rng, (24, 4))]
    lab = [rng.integers(0, 3, size=6), rng.integers(0, 3, size=24)]
    clf = nn.Linear(4, 3, init=nn.InitStream(SeededRng(7, 4)), dtype=np.float64)
    yield "multilevel_ce", \
        lambda: sup.multilevel_ce([clf(f) for f in feats], lab, [0.5, 0.25]), \
        [p for _, p in clf.named_parameters()], COMPOSITE_TOL


def run_gradcheck(echo=None) -> bool:
    """True when every operator passes; echo gets one line per check."""
    ok = True
    for name, f, params, tol in _checks():
        err = T.finite_diff_check(f, params)
        passed = err < tol
        ok = ok and passed
        if echo is not None:
            echo(f"{'PASS' if passed else 'FAIL'} {name:22s} "
                 f"max rel err {err:.3e} (tol {tol:.0e})")
    return ok
