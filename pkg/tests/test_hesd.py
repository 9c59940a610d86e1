import numpy as np
import pytest

from orsp import numerics as nx
from orsp.domain import with_ablation
from orsp.hesd import (HEADS, history_encode, predict_pack, predict_pack_linear, predict_pack_nodes,
                       predict_scanpath)
from orsp.model import init_params
from orsp.numerics import Tape, grad_check
from orsp.training import loss_token, loss_xy


def test_empty_history_is_zero(tiny_cfg):
    s = init_params(tiny_cfg, 0)
    h = history_encode(Tape(s), np.zeros((0, 4)), tiny_cfg)
    assert np.array_equal(h.value, np.zeros(tiny_cfg.d_hist))


def test_one_row_zero_params_is_zero(tiny_cfg):
    s = init_params(tiny_cfg, 0)
    for k in s.names():
        if k.startswith("hist.gru"):
            s.values[k][:] = 0.0
    h = history_encode(Tape(s), np.array([[0.3, 0.6, 0.0, 0.0]]), tiny_cfg)
    assert np.array_equal(h.value, np.zeros(tiny_cfg.d_hist))


def test_history_width_must_be_4(tiny_cfg):
    s = init_params(tiny_cfg, 0)
    with pytest.raises(nx.ShapeError):
        history_encode(Tape(s), np.zeros((2, 3)), tiny_cfg)


def test_history_is_order_sensitive(tiny_cfg):
    s = init_params(tiny_cfg, 0)
    T = np.array([[0.1, 0.2, 0.0, 0.0], [0.8, 0.7, 1 / 31, 0.0], [0.5, 0.5, 2 / 31, 1 / 3]])
    a = history_encode(Tape(s), T, tiny_cfg).value
    b = history_encode(Tape(s), T[[1, 0, 2]], tiny_cfg).value
    assert not np.array_equal(a, b)


def _zero_heads(store):
    for k in store.names():
        if k.startswith("head."):
            store.values[k][:] = 0.0


def test_zero_input_gives_half(tiny_cfg):
    s = init_params(tiny_cfg, 0)
    _zero_heads(s)
    p = predict_pack(s, np.zeros(tiny_cfg.d_ctx), np.zeros(tiny_cfg.d_hist), tiny_cfg)
    for arr in (p.X, p.Y, p.V):
        assert np.array_equal(arr, np.full(tiny_cfg.L_p, 0.5))


def test_heads_are_independent(tiny_cfg, rng):
    s = init_params(tiny_cfg, 0)
    H, h = rng.normal(size=tiny_cfg.d_ctx), rng.normal(size=tiny_cfg.d_hist)
    a = predict_pack(s, H, h, tiny_cfg)
    s.values["head.v.W1"] += 1.0
    s.values["head.v.b2"] -= 2.0
    b = predict_pack(s, H, h, tiny_cfg)
    assert np.array_equal(a.X, b.X) and np.array_equal(a.Y, b.Y)
    assert not np.array_equal(a.V, b.V)


def test_head_input_width_checked(tiny_cfg):
    s = init_params(tiny_cfg, 0)
    with pytest.raises(nx.ShapeError):
        predict_pack(s, np.zeros(tiny_cfg.d_ctx), np.zeros(tiny_cfg.d_hist + 1), tiny_cfg)


def test_outputs_in_unit_interval(tiny_cfg, rng):
    s = init_params(tiny_cfg, 0)
    p = predict_pack(s, 50 * rng.normal(size=tiny_cfg.d_ctx), 50 * rng.normal(size=tiny_cfg.d_hist), tiny_cfg)
    for arr in (p.X, p.Y, p.V):
        assert np.all((arr >= 0) & (arr <= 1))


def test_linear_head_zero_and_no_history(tiny_cfg):
    cfg = with_ablation(tiny_cfg, "no_hesd")
    s = init_params(cfg, 0)
    assert not any(k.startswith(("hist.", "head.")) for k in s.names())
    s.values["linear.W"][:] = 0.0
    p = predict_pack_linear(s, np.zeros(cfg.d_ctx), cfg)
    assert np.array_equal(np.concatenate([p.X, p.Y, p.V]), np.full(3 * cfg.L_p, 0.5))


def test_linear_head_gradients(tiny_cfg, rng):
    cfg = with_ablation(tiny_cfg, "no_hesd")
    s = init_params(cfg, 0)
    H = rng.normal(size=(3, cfg.d_ctx))
    coords = rng.random((3, cfg.L_p, 2))
    valid = np.array([[1, 1, 0, 0], [1, 0, 0, 0], [0, 0, 0, 0]], dtype=float)

    def build(t):
        X, Y, V = predict_pack_nodes(t, t.const(H), None, cfg)
        return nx.add(loss_xy(X, Y, coords, valid), loss_token(V, valid, 0.25, 2.0))

    rep = grad_check(build, s)
    assert rep.ok, rep.lines()


def test_pack_loss_gradients_through_heads(tiny_cfg, rng):
    s = init_params(tiny_cfg, 1)
    s.add("H", rng.normal(size=(3, tiny_cfg.d_ctx)))
    s.add("h", rng.normal(size=(3, tiny_cfg.d_hist)))
    coords = rng.random((3, tiny_cfg.L_p, 2))
    valid = np.array([[1, 1, 1, 0], [1, 0, 0, 0], [1, 1, 1, 1]], dtype=float)

    def build(t):
        X, Y, V = predict_pack_nodes(t, t.param("H"), t.param("h"), tiny_cfg)
        return nx.add(loss_xy(X, Y, coords, valid), loss_token(V, valid, 0.25, 2.0))

    names = [n for n in s.names() if n.startswith("head.")] + ["H", "h"]
    rep = grad_check(build, s, names=names)
    assert rep.ok, rep.lines()


def test_scanpath_has_L_plus_2_packs(trials, tiny_cfg):
    s = init_params(tiny_cfg, 0)
    t = trials[0]
    sp = predict_scanpath(t.image, t.expression, s, tiny_cfg)
    assert len(sp.packs) == len(t.expression) + 2
    assert all(f.in_range() for f in sp.fixations())


def test_rigged_validity_gives_empty_scanpath(trials, tiny_cfg):
    s = init_params(tiny_cfg, 0)
    s.values["head.v.W2"][:] = 0.0
    s.values["head.v.b2"][:] = np.log(0.3 / 0.7)
    sp = predict_scanpath(trials[1].image, trials[1].expression, s, tiny_cfg)
    assert sp.n_fixations == 0


@pytest.mark.parametrize("ablation", ["full", "no_hesd", "early_fusion"])
def test_scanpath_determinism_and_prefix_consistency(trials, tiny_cfg, ablation):
    cfg = with_ablation(tiny_cfg, ablation)
    s = init_params(cfg, 7)
    # lean the validity head towards FIX so packs are non-trivial
    if cfg.no_hesd:
        s.values["linear.b"][2 * cfg.L_p:] += 1.0
    else:
        s.values["head.v.b2"] += 1.0
    for t in trials[:6]:
        full = predict_scanpath(t.image, t.expression, s, cfg)
        assert full.n_fixations > 0
        assert full == predict_scanpath(t.image, t.expression, s, cfg)
        for k in range(1, len(t.expression)):
            pre = predict_scanpath(t.image, t.expression.prefix(k), s, cfg)
            assert pre.packs[:k] == full.packs[:k]


def test_heads_listing():
    assert HEADS == ("x", "y", "v")
