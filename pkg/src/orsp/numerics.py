"""Small reverse-mode autodiff over float64 numpy arrays.

Every op appends its output node to the tape of its inputs, so the tape is
already in topological order and ``Tape.backward`` just walks it in reverse.
Only the handful of ops the scanpath model needs are provided; there is no
broadcasting beyond what each op documents.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

PROB_EPS = 1e-7


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class Node:
    __slots__ = ("value", "grad", "parents", "backward_fn", "op", "tape", "requires_grad")

    def __init__(self, value, tape, op, parents=(), backward_fn=None, requires_grad=False):
        self.value = value
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op
        self.tape = tape
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(op={self.op}, shape={self.value.shape})"


def _accum(node: Node, g: np.ndarray) -> None:
    if not node.requires_grad:
        return
    node.grad = g if node.grad is None else node.grad + g


class ParamStore:
    """Named trainable tensors plus gradient accumulators and optimizer slots."""

    def __init__(self):
        self.values: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.state: dict[str, dict[str, np.ndarray]] = {}

    def add(self, name: str, value: np.ndarray) -> None:
        if name in self.values:
            raise KeyError(f"duplicate parameter name {name!r}")
        value = np.array(value, dtype=np.float64)
        self.values[name] = value
        self.grads[name] = np.zeros_like(value)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.values[name]

    def __contains__(self, name: str) -> bool:
        return name in self.values

    def names(self) -> list[str]:
        return list(self.values)

    def zero_grad(self) -> None:
        for name, v in self.values.items():
            self.grads[name] = np.zeros_like(v)

    def n_elements(self) -> int:
        return int(sum(v.size for v in self.values.values()))

    def copy(self) -> "ParamStore":
        return copy.deepcopy(self)


class Tape:
    """Records nodes in creation order; parameters are bound by name."""

    def __init__(self, store: ParamStore | None = None, grad: bool = True):
        self.store = store
        self.grad_enabled = grad
        self.nodes: list[Node] = []
        self.leaves: dict[str, Node] = {}

    def param(self, name: str) -> Node:
        node = self.leaves.get(name)
        if node is None:
            node = Node(self.store.values[name], self, "param", requires_grad=self.grad_enabled)
            self.leaves[name] = node
        return node

    def const(self, value) -> Node:
        return Node(np.asarray(value, dtype=np.float64), self, "const")

    def record(self, value, op, parents, backward_fn) -> Node:
        if not np.all(np.isfinite(value)):
            raise NonFiniteError(f"op {op!r} produced a non-finite value")
        requires_grad = any(p.requires_grad for p in parents)
        node = Node(value, self, op, parents, backward_fn if requires_grad else None, requires_grad)
        if requires_grad:
            self.nodes.append(node)
        return node

    def backward(self, loss: Node) -> None:
        """Accumulate d(loss)/d(param) into ``store.grads`` for every bound parameter."""
        if loss.value.size != 1 or loss.value.ndim > 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.value.shape}")
        if not loss.requires_grad:
            return
        loss.grad = np.ones_like(loss.value)
        for node in reversed(self.nodes):
            if node.grad is not None:
                node.backward_fn(node.grad)
        for name, leaf in self.leaves.items():
            if leaf.grad is not None:
                self.store.grads[name] = self.store.grads[name] + leaf.grad


def _tape(*nodes: Node) -> Tape:
    return nodes[0].tape


def _check(cond: bool, msg: str) -> None:
    if not cond:
        raise ShapeError(msg)


# ---------------------------------------------------------------- elementwise

def add(a: Node, b: Node) -> Node:
    _check(a.shape == b.shape, f"add: {a.shape} vs {b.shape}")

    def bw(g):
        _accum(a, g)
        _accum(b, g)

    return _tape(a).record(a.value + b.value, "add", (a, b), bw)


def sub(a: Node, b: Node) -> Node:
    _check(a.shape == b.shape, f"sub: {a.shape} vs {b.shape}")

    def bw(g):
        _accum(a, g)
        _accum(b, -g)

    return _tape(a).record(a.value - b.value, "sub", (a, b), bw)


def mul(a: Node, b: Node) -> Node:
    _check(a.shape == b.shape, f"mul: {a.shape} vs {b.shape}")

    def bw(g):
        _accum(a, g * b.value)
        _accum(b, g * a.value)

    return _tape(a).record(a.value * b.value, "mul", (a, b), bw)


def scale(a: Node, c: float) -> Node:
    c = float(c)
    return _tape(a).record(a.value * c, "scale", (a,), lambda g: _accum(a, g * c))


def sigmoid(a: Node) -> Node:
    x = a.value
    # split form avoids overflow in exp for large |x|
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _tape(a).record(out, "sigmoid", (a,), lambda g: _accum(a, g * out * (1.0 - out)))


def tanh(a: Node) -> Node:
    out = np.tanh(a.value)
    return _tape(a).record(out, "tanh", (a,), lambda g: _accum(a, g * (1.0 - out * out)))


def abs_(a: Node) -> Node:
    sign = np.sign(a.value)
    return _tape(a).record(np.abs(a.value), "abs", (a,), lambda g: _accum(a, g * sign))


def square(a: Node) -> Node:
    x = a.value
    return _tape(a).record(x * x, "square", (a,), lambda g: _accum(a, 2.0 * g * x))


# ---------------------------------------------------------------- reductions

def sum_(a: Node) -> Node:
    shape = a.shape
    return _tape(a).record(np.array(a.value.sum()), "sum", (a,),
                           lambda g: _accum(a, np.full(shape, float(g))))


def mean(a: Node) -> Node:
    shape, n = a.shape, a.value.size
    return _tape(a).record(np.array(a.value.sum() / n), "mean", (a,),
                           lambda g: _accum(a, np.full(shape, float(g) / n)))


# ---------------------------------------------------------------- structure

def concat(nodes: Sequence[Node], axis: int = -1) -> Node:
    values = [n.value for n in nodes]
    ndims = {v.ndim for v in values}
    _check(len(ndims) == 1, "concat: mixed ranks")
    out = np.concatenate(values, axis=axis)
    bounds = np.cumsum([0] + [v.shape[axis] for v in values])

    def bw(g):
        for n, lo, hi in zip(nodes, bounds[:-1], bounds[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _accum(n, g[tuple(idx)])

    return _tape(*nodes).record(out, "concat", tuple(nodes), bw)


def stack(nodes: Sequence[Node]) -> Node:
    shapes = {n.shape for n in nodes}
    _check(len(shapes) == 1, f"stack: mixed shapes {shapes}")
    out = np.stack([n.value for n in nodes])

    def bw(g):
        for i, n in enumerate(nodes):
            _accum(n, g[i])

    return _tape(*nodes).record(out, "stack", tuple(nodes), bw)


def row(a: Node, i: int) -> Node:
    shape = a.shape

    def bw(g):
        full = np.zeros(shape)
        full[i] = g
        _accum(a, full)

    return _tape(a).record(a.value[i].copy(), "row", (a,), bw)


def rows(a: Node, lo: int, hi: int) -> Node:
    shape = a.shape

    def bw(g):
        full = np.zeros(shape)
        full[lo:hi] = g
        _accum(a, full)

    return _tape(a).record(a.value[lo:hi].copy(), "rows", (a,), bw)


def cols(a: Node, lo: int, hi: int) -> Node:
    shape = a.shape

    def bw(g):
        full = np.zeros(shape)
        full[..., lo:hi] = g
        _accum(a, full)

    return _tape(a).record(a.value[..., lo:hi].copy(), "cols", (a,), bw)


def gather(table: Node, ids: Sequence[int]) -> Node:
    """Embedding lookup: rows ``ids`` of ``table`` -> [len(ids), d]."""
    ids = np.asarray(ids, dtype=np.int64)
    n_rows = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n_rows):
        raise IndexError(f"gather: ids out of range for table with {n_rows} rows")
    shape = table.shape

    def bw(g):
        full = np.zeros(shape)
        np.add.at(full, ids, g)
        _accum(table, full)

    return _tape(table).record(table.value[ids], "gather", (table,), bw)


# ---------------------------------------------------------------- layers

def affine(x: Node, W: Node, b: Node) -> Node:
    """y = x @ W + b for x of shape [in] or [n, in]."""
    _check(W.value.ndim == 2 and b.shape == (W.shape[1],),
           f"affine: W {W.shape} / b {b.shape} mismatch")
    _check(x.shape[-1] == W.shape[0], f"affine: x {x.shape} vs W {W.shape}")
    xv, Wv = x.value, W.value
    out = xv @ Wv + b.value

    def bw(g):
        _accum(x, g @ Wv.T)
        if xv.ndim == 1:
            _accum(W, np.outer(xv, g))
            _accum(b, g)
        else:
            _accum(W, xv.T @ g)
            _accum(b, g.sum(axis=0))

    return _tape(x, W, b).record(out, "affine", (x, W, b), bw)


GRU_GATES = ("z", "r", "h")


def gru_params(store: ParamStore, prefix: str, d_in: int, d_h: int, rng: np.random.Generator) -> None:
    scale_ = 1.0 / np.sqrt(d_in + d_h)
    for gate in GRU_GATES:
        store.add(f"{prefix}.W{gate}", rng.normal(0.0, scale_, (d_in + d_h, d_h)))
        store.add(f"{prefix}.b{gate}", np.zeros(d_h))


def gru_cell(x: Node, h: Node, tape: Tape, prefix: str) -> Node:
    """One GRU step; weights act on the concatenation [x, h]."""
    Wz, bz = tape.param(f"{prefix}.Wz"), tape.param(f"{prefix}.bz")
    Wr, br = tape.param(f"{prefix}.Wr"), tape.param(f"{prefix}.br")
    Wh, bh = tape.param(f"{prefix}.Wh"), tape.param(f"{prefix}.bh")
    xh = concat([x, h])
    z = sigmoid(affine(xh, Wz, bz))
    r = sigmoid(affine(xh, Wr, br))
    cand = tanh(affine(concat([x, mul(r, h)]), Wh, bh))
    # (1 - z) * h + z * cand, written so z = 0.5, cand = 0 gives exactly 0.5 * h
    return add(h, mul(z, sub(cand, h)))


def mlp2_params(store: ParamStore, prefix: str, d_in: int, d_hidden: int, d_out: int,
                rng: np.random.Generator) -> None:
    store.add(f"{prefix}.W1", rng.normal(0.0, 1.0 / np.sqrt(d_in), (d_in, d_hidden)))
    store.add(f"{prefix}.b1", np.zeros(d_hidden))
    store.add(f"{prefix}.W2", rng.normal(0.0, 1.0 / np.sqrt(d_hidden), (d_hidden, d_out)))
    store.add(f"{prefix}.b2", np.zeros(d_out))


def mlp2(x: Node, tape: Tape, prefix: str) -> Node:
    hidden = tanh(affine(x, tape.param(f"{prefix}.W1"), tape.param(f"{prefix}.b1")))
    return affine(hidden, tape.param(f"{prefix}.W2"), tape.param(f"{prefix}.b2"))


# ---------------------------------------------------------------- losses

def softmax_cross_entropy(logits: Node, targets: Sequence[int]) -> Node:
    """Mean cross-entropy of rows of ``logits`` [n, V] against integer targets."""
    z = logits.value
    _check(z.ndim == 2, f"softmax_cross_entropy: logits must be 2-D, got {z.shape}")
    t = np.asarray(targets, dtype=np.int64)
    _check(t.shape == (z.shape[0],), "softmax_cross_entropy: one target per row")
    if t.size and (t.min() < 0 or t.max() >= z.shape[1]):
        raise IndexError("softmax_cross_entropy: target id out of range")
    n = z.shape[0]
    shifted = z - z.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=1))
    logp = shifted - logsumexp[:, None]
    loss = -logp[np.arange(n), t].sum() / n

    def bw(g):
        d = np.exp(logp)
        d[np.arange(n), t] -= 1.0
        _accum(logits, float(g) * d / n)

    return _tape(logits).record(np.array(loss), "softmax_ce", (logits,), bw)


def clamp_prob(p: np.ndarray) -> np.ndarray:
    return np.clip(p, PROB_EPS, 1.0 - PROB_EPS)


def focal_values(p: np.ndarray, y: np.ndarray, alpha: float, gamma: float) -> np.ndarray:
    """Elementwise focal loss -a_t (1 - p_t)^gamma ln p_t on clamped probabilities."""
    p = clamp_prob(p)
    pt = np.where(y > 0.5, p, 1.0 - p)
    at = np.where(y > 0.5, alpha, 1.0 - alpha)
    return -at * (1.0 - pt) ** gamma * np.log(pt)


def focal(p: Node, y: np.ndarray, alpha: float, gamma: float) -> Node:
    y = np.asarray(y, dtype=np.float64)
    _check(p.shape == y.shape, f"focal: {p.shape} vs {y.shape}")
    raw = p.value
    inside = (raw > PROB_EPS) & (raw < 1.0 - PROB_EPS)
    pc = clamp_prob(raw)
    pos = y > 0.5
    pt = np.where(pos, pc, 1.0 - pc)
    at = np.where(pos, alpha, 1.0 - alpha)
    out = -at * (1.0 - pt) ** gamma * np.log(pt)

    def bw(g):
        one_m = 1.0 - pt
        if gamma == 0:
            d_pt = -at / pt
        else:
            d_pt = at * (gamma * one_m ** (gamma - 1.0) * np.log(pt) - one_m ** gamma / pt)
        d_p = np.where(pos, d_pt, -d_pt) * inside
        _accum(p, g * d_p)

    return _tape(p).record(out, "focal", (p,), bw)


# ---------------------------------------------------------------- grad check

def rel_err(a, n):
    a, n = np.asarray(a, dtype=np.float64), np.asarray(n, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)


@dataclass
class GradCheckReport:
    max_rel_err: dict[str, float]
    n_checked: dict[str, int]
    tol: float
    failures: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failures

    @property
    def worst(self) -> float:
        return max(self.max_rel_err.values(), default=0.0)

    def lines(self) -> list[str]:
        out = []
        for name in sorted(self.max_rel_err):
            flag = "FAIL" if name in self.failures else "ok"
            out.append(f"{name:32s} n={self.n_checked[name]:5d} max_rel_err={self.max_rel_err[name]:.3e} {flag}")
        return out


def grad_check(build_loss: Callable[[Tape], Node], store: ParamStore, eps: float = 1e-4,
               tol: float = 1e-4, max_elements: int = 64, names: Iterable[str] | None = None,
               seed: int = 0) -> GradCheckReport:
    """Compare analytic gradients against central differences, per named parameter.

    Tensors larger than ``max_elements`` are checked on a seeded random subsample.
    ``build_loss`` receives a fresh tape bound to ``store`` and returns a scalar node.
    """
    rng = np.random.default_rng(seed)
    names = list(store.names() if names is None else names)

    def forward() -> float:
        return float(build_loss(Tape(store, grad=False)).value)

    f0 = forward()
    if forward() != f0:
        raise RuntimeError("grad_check: loss builder is not deterministic")

    saved = {n: g.copy() for n, g in store.grads.items()}
    store.zero_grad()
    tape = Tape(store)
    tape.backward(build_loss(tape))
    analytic = {n: store.grads[n].copy() for n in names}
    store.grads.update(saved)

    report = GradCheckReport({}, {}, tol)
    for name in names:
        value = store.values[name]
        flat = value.reshape(-1)
        if flat.size <= max_elements:
            idx = np.arange(flat.size)
        else:
            idx = np.sort(rng.choice(flat.size, size=max_elements, replace=False))
        numeric = np.empty(idx.size)
        for k, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + eps
            fp = forward()
            flat[i] = orig - eps
            fm = forward()
            flat[i] = orig
            numeric[k] = (fp - fm) / (2.0 * eps)
        errs = rel_err(analytic[name].reshape(-1)[idx], numeric)
        worst = float(errs.max()) if errs.size else 0.0
        report.max_rel_err[name] = worst
        report.n_checked[name] = int(idx.size)
        if worst >= tol:
            report.failures.append(name)
    return report
