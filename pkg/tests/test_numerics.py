import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from orsp import numerics as nx
from orsp.numerics import ParamStore, Tape, grad_check


def _store(rng, **shapes):
    s = ParamStore()
    for name, shape in shapes.items():
        s.add(name, rng.normal(size=shape))
    return s


def test_affine_zero_and_identity(rng):
    s = ParamStore()
    s.add("W", rng.normal(size=(3, 5)))
    s.add("b", np.zeros(5))
    t = Tape(s)
    zero = nx.affine(t.const(np.zeros((2, 3))), t.param("W"), t.const(np.zeros(5)))
    assert np.array_equal(zero.value, np.zeros((2, 5)))
    ident = nx.affine(t.const(np.eye(3)), t.param("W"), t.param("b"))
    assert np.array_equal(ident.value, s["W"])


def test_affine_shape_error(rng):
    s = _store(rng, W=(3, 5), b=(5,))
    t = Tape(s)
    with pytest.raises(nx.ShapeError):
        nx.affine(t.const(np.zeros((2, 4))), t.param("W"), t.param("b"))


def test_affine_gradients_match_differences(rng):
    s = _store(rng, x=(4, 3), W=(3, 5), b=(5,))
    C = rng.normal(size=(4, 5))
    rep = grad_check(lambda t: nx.sum_(nx.mul(nx.affine(t.param("x"), t.param("W"), t.param("b")), t.const(C))), s)
    assert rep.worst < 1e-6, rep.lines()


def test_gru_zero_weights():
    s = ParamStore()
    for g in nx.GRU_GATES:
        s.add(f"g.W{g}", np.zeros((5, 3)))
        s.add(f"g.b{g}", np.zeros(3))
    t = Tape(s)
    h = np.array([0.4, -1.0, 2.0])
    out = nx.gru_cell(t.const(np.ones(2)), t.const(h), t, "g")
    assert np.array_equal(out.value, 0.5 * h)
    out0 = nx.gru_cell(t.const(np.ones(2)), t.const(np.zeros(3)), t, "g")
    assert np.array_equal(out0.value, np.zeros(3))


def test_gru_matches_reference_formula(rng):
    s = ParamStore()
    nx.gru_params(s, "g", 3, 4, rng)
    for g in nx.GRU_GATES:
        s.values[f"g.b{g}"] += rng.normal(size=4)
    x, h = rng.normal(size=3), rng.normal(size=4)
    t = Tape(s)
    out = nx.gru_cell(t.const(x), t.const(h), t, "g").value

    sig = lambda v: 1 / (1 + np.exp(-v))
    xh = np.concatenate([x, h])
    z = sig(xh @ s["g.Wz"] + s["g.bz"])
    r = sig(xh @ s["g.Wr"] + s["g.br"])
    cand = np.tanh(np.concatenate([x, r * h]) @ s["g.Wh"] + s["g.bh"])
    assert np.allclose(out, (1 - z) * h + z * cand, atol=1e-14)


def test_gru_gradients(rng):
    s = ParamStore()
    nx.gru_params(s, "g", 3, 4, rng)
    s.add("x", rng.normal(size=3))
    s.add("h", rng.normal(size=4))
    rep = grad_check(lambda t: nx.sum_(nx.gru_cell(t.param("x"), t.param("h"), t, "g")), s)
    assert rep.worst < 1e-5, rep.lines()


def test_mlp2_zero_cases(rng):
    s = ParamStore()
    nx.mlp2_params(s, "m", 3, 4, 2, rng)
    t = Tape(s)
    assert np.array_equal(nx.mlp2(t.const(np.zeros(3)), t, "m").value, np.zeros(2))
    s.values["m.W1"][:] = 0.0
    s.values["m.b2"][:] = [0.7, -0.2]
    out = nx.mlp2(t.const(rng.normal(size=3)), Tape(s), "m")
    assert np.array_equal(out.value, [0.7, -0.2])


def test_mlp2_gradients(rng):
    s = ParamStore()
    nx.mlp2_params(s, "m", 3, 6, 2, rng)
    s.values["m.b1"] += rng.normal(size=6)
    s.add("x", rng.normal(size=(5, 3)))
    rep = grad_check(lambda t: nx.sum_(nx.square(nx.mlp2(t.param("x"), t, "m"))), s)
    assert rep.worst < 1e-5, rep.lines()


def test_backward_sum_and_zero():
    s = ParamStore()
    s.add("p", np.arange(6.0).reshape(2, 3))
    t = Tape(s)
    t.backward(nx.sum_(t.param("p")))
    assert np.array_equal(s.grads["p"], np.ones((2, 3)))
    s.zero_grad()
    t = Tape(s)
    t.backward(nx.scale(nx.sum_(nx.tanh(t.param("p"))), 0.0))
    assert np.array_equal(s.grads["p"], np.zeros((2, 3)))


def test_backward_rejects_non_scalar():
    s = ParamStore()
    s.add("p", np.ones(3))
    t = Tape(s)
    with pytest.raises(nx.ShapeError):
        t.backward(nx.tanh(t.param("p")))


def test_unreachable_param_gets_zero():
    s = ParamStore()
    s.add("a", np.ones(2))
    s.add("b", np.ones(2))
    t = Tape(s)
    t.backward(nx.sum_(t.param("a")))
    assert np.array_equal(s.grads["b"], np.zeros(2))


def test_backward_is_linear(rng):
    s = _store(rng, p=(3, 4), W=(4, 2), b=(2,))

    def l1(t):
        return nx.sum_(nx.sigmoid(nx.affine(t.param("p"), t.param("W"), t.param("b"))))

    def l2(t):
        return nx.mean(nx.square(nx.tanh(t.param("p"))))

    def grads(build):
        s.zero_grad()
        t = Tape(s)
        t.backward(build(t))
        return {k: v.copy() for k, v in s.grads.items()}

    a, b = 1.7, -0.3
    g1, g2 = grads(l1), grads(l2)
    gc = grads(lambda t: nx.add(nx.scale(l1(t), a), nx.scale(l2(t), b)))
    for k in gc:
        assert np.max(np.abs(gc[k] - (a * g1[k] + b * g2[k]))) < 1e-10


def test_cross_entropy_uniform_is_log_vocab():
    t = Tape()
    loss = nx.softmax_cross_entropy(t.const(np.zeros((3, 7))), [0, 3, 6])
    assert loss.value == pytest.approx(np.log(7), abs=1e-15)


def test_cross_entropy_gradients(rng):
    s = _store(rng, z=(4, 6))
    rep = grad_check(lambda t: nx.softmax_cross_entropy(t.param("z"), [1, 0, 5, 2]), s)
    assert rep.worst < 1e-6


def test_focal_gradients_inside_clamp(rng):
    s = ParamStore()
    s.add("u", rng.normal(size=(3, 4)))
    y = (rng.random((3, 4)) < 0.4).astype(float)
    rep = grad_check(lambda t: nx.mean(nx.focal(nx.sigmoid(t.param("u")), y, 0.25, 2.0)), s)
    assert rep.worst < 1e-6


def test_gather_accumulates_repeated_rows():
    s = ParamStore()
    s.add("E", np.zeros((4, 2)))
    t = Tape(s)
    t.backward(nx.sum_(nx.gather(t.param("E"), [1, 1, 3])))
    assert np.array_equal(s.grads["E"], [[0, 0], [2, 2], [0, 0], [1, 1]])


@pytest.mark.filterwarnings("ignore:overflow")
def test_non_finite_is_an_error():
    s = ParamStore()
    s.add("p", np.array([1e308]))
    t = Tape(s)
    with pytest.raises(nx.NonFiniteError):
        nx.scale(t.param("p"), 10.0)


def test_grad_check_quadratic_is_exact(rng):
    s = _store(rng, p=(5,))
    rep = grad_check(lambda t: nx.sum_(nx.square(t.param("p"))), s)
    assert rep.worst < 1e-9


def test_grad_check_flags_corrupted_backward(rng):
    s = _store(rng, a=(3,), b=(3,))

    def broken_tanh(a):
        # derivative should be 1 - out**2
        out = np.tanh(a.value)
        return nx._tape(a).record(out, "tanh", (a,), lambda g: nx._accum(a, g * (1.0 - out)))

    def build(t):
        return nx.add(nx.sum_(nx.square(t.param("a"))), nx.sum_(broken_tanh(t.param("b"))))

    rep = grad_check(build, s)
    assert rep.failures == ["b"]


def test_grad_check_detects_nondeterminism(rng):
    s = _store(rng, p=(2,))
    noise = iter(np.random.default_rng(0).normal(size=100))
    with pytest.raises(RuntimeError):
        grad_check(lambda t: nx.sum_(nx.scale(t.param("p"), next(noise))), s)


def test_grad_check_restores_grads(rng):
    s = _store(rng, p=(3,))
    s.grads["p"][:] = 5.0
    grad_check(lambda t: nx.sum_(nx.square(t.param("p"))), s)
    assert np.array_equal(s.grads["p"], np.full(3, 5.0))


def test_param_store_rejects_duplicates():
    s = ParamStore()
    s.add("w", np.zeros(2))
    with pytest.raises(KeyError):
        s.add("w", np.zeros(2))


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-800, 800), min_size=1, max_size=8))
def test_sigmoid_tanh_saturate_without_overflow(xs):
    t = Tape()
    v = t.const(np.array(xs))
    sg = nx.sigmoid(v).value
    th = nx.tanh(v).value
    assert np.all((sg >= 0) & (sg <= 1)) and np.all(np.abs(th) <= 1)


@settings(max_examples=60, deadline=None)
@given(st.floats(0.0, 1.0), st.integers(0, 1))
def test_focal_is_finite_on_closed_interval(p, y):
    v = nx.focal_values(np.array(p), np.array(y), 0.25, 2.0)
    assert np.isfinite(v) and v >= 0
