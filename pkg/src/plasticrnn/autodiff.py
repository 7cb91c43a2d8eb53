"""Float64 tensors on a recording tape, with reverse-mode gradients that can
themselves be differentiated.

Every operation is recorded as a node holding its op kind, parent node ids
and computed value. ``Tape.grad`` walks the recorded graph backwards and
emits the backward pass either as *new tape nodes* (``create_graph=True``,
the default) or as raw arrays (``create_graph=False``, cheaper, for a final
gradient that nothing differentiates again). Re-recording the backward pass
is what lets a weight update that consumes gradients stay differentiable.

Conventions baked into the op set:

- values are dense ``numpy`` float64 arrays of rank 0..3;
- batched op kinds (``bvm``, ``bouter``, ``bscale``, ...) carry an explicit
  leading batch axis and keep samples independent; shared unbatched operands
  broadcast over that axis and collect batch-summed gradients;
- ``relu``'s subgradient at 0 is 0, and ``minc`` (elementwise min with a
  constant) selects the non-constant branch at an exact tie. Both masks are
  recorded as constants, so second derivatives through them are exactly zero.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

__all__ = [
    "GraphError",
    "ShapeError",
    "Tape",
    "Tensor",
    "finite_difference_oracle",
    "grad",
]


class ShapeError(ValueError):
    """Operand shapes violate an op's shape rule."""


class GraphError(ValueError):
    """Malformed graph request (wrong tape, non-scalar grad target, ...)."""


def _as_f64(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim > 3:
        raise ShapeError(f"rank {a.ndim} > 3 not supported (shape {a.shape})")
    return a


class Tensor:
    """A float64 array, optionally bound to one node on one tape."""

    __slots__ = ("data", "tape", "node")

    def __init__(self, data: np.ndarray, tape: "Tape | None" = None, node: int | None = None):
        self.data = data
        self.tape = tape
        self.node = node

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def rank(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        where = f"node={self.node}" if self.node is not None else "unbound"
        return f"Tensor(shape={self.data.shape}, {where})"

    # Light operator sugar; dispatch is strict (no implicit broadcasting
    # beyond the op set's own rules).
    def _rec(self, kind, *xs, ctx=None):
        if self.tape is None:
            raise GraphError("operators require a tape-bound tensor")
        return self.tape.record(kind, *xs, ctx=ctx)

    def __add__(self, other):
        return self._rec("add", self, other)

    def __sub__(self, other):
        return self._rec("subtract", self, other)

    def __neg__(self):
        return self._rec("smul", self, ctx=-1.0)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return self._rec("smul", self, ctx=float(other))
        if isinstance(other, Tensor) and other.rank == 0 and self.rank > 0:
            return self._rec("tsmul", self, other)
        if isinstance(other, Tensor) and self.rank == 0 and other.rank > 0:
            return self._rec("tsmul", other, self)
        return self._rec("multiply", self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return self._rec("matmul", self, other)


class Node:
    __slots__ = ("op", "parents", "value", "ctx")

    def __init__(self, op: str, parents: tuple, value: np.ndarray, ctx):
        self.op = op
        self.parents = parents
        self.value = value
        self.ctx = ctx


# ---------------------------------------------------------------------------
# forward rules
# ---------------------------------------------------------------------------

_FORWARD: dict[str, Callable] = {}


def _op(name):
    def deco(fn):
        _FORWARD[name] = fn
        return fn

    return deco


def _bad(op, *arrs):
    shapes = ", ".join(str(a.shape) for a in arrs)
    raise ShapeError(f"{op}: incompatible shapes {shapes}")


@_op("matmul")
def _f_matmul(v, ctx):
    a, b = v
    if a.ndim == 2 and b.ndim == 2 and a.shape[1] == b.shape[0]:
        return a @ b
    if a.ndim == 2 and b.ndim == 1 and a.shape[1] == b.shape[0]:
        return a @ b
    if a.ndim == 1 and b.ndim == 2 and a.shape[0] == b.shape[0]:
        return a @ b
    _bad("matmul", a, b)


@_op("transpose")
def _f_transpose(v, ctx):
    (a,) = v
    if a.ndim != 2:
        _bad("transpose", a)
    return a.T.copy()


@_op("add")
def _f_add(v, ctx):
    a, b = v
    if a.shape != b.shape:
        _bad("add", a, b)
    return a + b


@_op("subtract")
def _f_subtract(v, ctx):
    a, b = v
    if a.shape != b.shape:
        _bad("subtract", a, b)
    return a - b


@_op("multiply")
def _f_multiply(v, ctx):
    a, b = v
    if a.shape != b.shape:
        _bad("multiply", a, b)
    return a * b


@_op("smul")
def _f_smul(v, ctx):
    (a,) = v
    return a * ctx


@_op("tsmul")
def _f_tsmul(v, ctx):
    a, s = v
    if s.ndim != 0:
        _bad("tsmul", a, s)
    return a * s


@_op("concat")
def _f_concat(v, ctx):
    for a in v:
        if a.ndim != 1:
            _bad("concat", *v)
    return np.concatenate(v)


@_op("slice")
def _f_slice(v, ctx):
    (a,) = v
    start, stop = ctx
    if a.ndim != 1 or not (0 <= start <= stop <= a.shape[0]):
        raise ShapeError(f"slice: [{start}:{stop}] of shape {a.shape}")
    return a[start:stop].copy()


@_op("embed")
def _f_embed(v, ctx):
    (a,) = v
    start, total = ctx
    if a.ndim != 1 or start + a.shape[0] > total:
        raise ShapeError(f"embed: {a.shape} at {start} into length {total}")
    out = np.zeros(total)
    out[start : start + a.shape[0]] = a
    return out


@_op("sum")
def _f_sum(v, ctx):
    return np.asarray(v[0].sum())


@_op("mean")
def _f_mean(v, ctx):
    return np.asarray(v[0].mean())


@_op("sumsq")
def _f_sumsq(v, ctx):
    a = v[0].ravel()
    return np.asarray(np.dot(a, a))


@_op("square")
def _f_square(v, ctx):
    return v[0] * v[0]


@_op("sqrt")
def _f_sqrt(v, ctx):
    return np.sqrt(v[0])


@_op("sigmoid")
def _f_sigmoid(v, ctx):
    x = v[0]
    out = np.empty_like(x)
    np.exp(-np.abs(x), out=out)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + out[pos])
    out[~pos] = out[~pos] / (1.0 + out[~pos])
    return out


@_op("tanh")
def _f_tanh(v, ctx):
    return np.tanh(v[0])


@_op("relu")
def _f_relu(v, ctx):
    return np.maximum(v[0], 0.0)


@_op("exp")
def _f_exp(v, ctx):
    return np.exp(v[0])


@_op("log")
def _f_log(v, ctx):
    return np.log(v[0])


@_op("reciprocal")
def _f_reciprocal(v, ctx):
    return 1.0 / v[0]


@_op("outer")
def _f_outer(v, ctx):
    u, w = v
    if u.ndim != 1 or w.ndim != 1:
        _bad("outer", u, w)
    return np.outer(u, w)


@_op("l2norm")
def _f_l2norm(v, ctx):
    a = v[0].ravel()
    return np.asarray(np.sqrt(np.dot(a, a)))


@_op("minc")
def _f_minc(v, ctx):
    return np.minimum(v[0], ctx)


@_op("fill")
def _f_fill(v, ctx):
    (s,) = v
    if s.ndim != 0:
        _bad("fill", s)
    return np.full(ctx, float(s))


# --- batched kinds (leading axis = independent samples) --------------------


@_op("bvm")
def _f_bvm(v, ctx):
    w, p = v
    if w.ndim != 3 or p.ndim != 2 or w.shape[0] != p.shape[0] or w.shape[1] != p.shape[1]:
        _bad("bvm", w, p)
    return np.matmul(p[:, None, :], w)[:, 0, :]


@_op("bmv")
def _f_bmv(v, ctx):
    w, q = v
    if w.ndim != 3 or q.ndim != 2 or w.shape[0] != q.shape[0] or w.shape[2] != q.shape[1]:
        _bad("bmv", w, q)
    return np.matmul(w, q[:, :, None])[:, :, 0]


@_op("bouter")
def _f_bouter(v, ctx):
    u, w = v
    if u.ndim != 2 or w.ndim != 2 or u.shape[0] != w.shape[0]:
        _bad("bouter", u, w)
    return u[:, :, None] * w[:, None, :]


@_op("add0")
def _f_add0(v, ctx):
    x, a = v
    if x.ndim < 1 or x.shape[1:] != a.shape:
        _bad("add0", x, a)
    return x + a


@_op("mul0")
def _f_mul0(v, ctx):
    x, a = v
    if x.ndim < 1 or x.shape[1:] != a.shape:
        _bad("mul0", x, a)
    return x * a


@_op("sum0")
def _f_sum0(v, ctx):
    x = v[0]
    if x.ndim < 1:
        _bad("sum0", x)
    return x.sum(axis=0)


@_op("bcast0")
def _f_bcast0(v, ctx):
    (a,) = v
    return np.broadcast_to(a, (ctx,) + a.shape).copy()


@_op("bscale")
def _f_bscale(v, ctx):
    x, t = v
    if t.ndim != 1 or x.ndim < 1 or x.shape[0] != t.shape[0]:
        _bad("bscale", x, t)
    return x * t.reshape((-1,) + (1,) * (x.ndim - 1))


@_op("bsum")
def _f_bsum(v, ctx):
    x = v[0]
    if x.ndim < 1:
        _bad("bsum", x)
    return x.reshape(x.shape[0], -1).sum(axis=1)


@_op("bsumsq")
def _f_bsumsq(v, ctx):
    x = v[0]
    if x.ndim < 1:
        _bad("bsumsq", x)
    flat = x.reshape(x.shape[0], -1)
    return np.einsum("bi,bi->b", flat, flat)


@_op("bexpand")
def _f_bexpand(v, ctx):
    (t,) = v
    if t.ndim != 1:
        _bad("bexpand", t)
    shape = (t.shape[0],) + tuple(ctx)
    return np.broadcast_to(t.reshape((-1,) + (1,) * len(ctx)), shape).copy()


@_op("col")
def _f_col(v, ctx):
    x = v[0]
    if x.ndim != 2 or not (0 <= ctx < x.shape[1]):
        raise ShapeError(f"col: column {ctx} of shape {x.shape}")
    return x[:, ctx].copy()


@_op("pcol")
def _f_pcol(v, ctx):
    (t,) = v
    n, j = ctx
    if t.ndim != 1 or not (0 <= j < n):
        raise ShapeError(f"pcol: column {j} of width {n}, got shape {t.shape}")
    out = np.zeros((t.shape[0], n))
    out[:, j] = t
    return out


@_op("cols")
def _f_cols(v, ctx):
    x = v[0]
    a, b = ctx
    if x.ndim != 2 or not (0 <= a <= b <= x.shape[1]):
        raise ShapeError(f"cols: [{a}:{b}] of shape {x.shape}")
    return x[:, a:b].copy()


@_op("pcols")
def _f_pcols(v, ctx):
    (y,) = v
    n, a = ctx
    if y.ndim != 2 or a + y.shape[1] > n:
        raise ShapeError(f"pcols: {y.shape} at {a} into width {n}")
    out = np.zeros((y.shape[0], n))
    out[:, a : a + y.shape[1]] = y
    return out


# --- fused update kinds -----------------------------------------------------


def _update_shapes_ok(w, d, eta, coef):
    if w.shape != d.shape or coef.shape != w.shape[w.ndim - coef.ndim :]:
        return False
    if eta.ndim == 0:
        return coef.shape == w.shape
    return eta.ndim == 1 and w.ndim >= 2 and eta.shape[0] == w.shape[0] and coef.shape == w.shape[1:]


@_op("plastic_update")
def _f_plastic_update(v, ctx):
    w, d, eta, coef = v
    if not _update_shapes_ok(w, d, eta, coef):
        _bad("plastic_update", w, d, eta, coef)
    e = eta if eta.ndim == 0 else eta.reshape((-1,) + (1,) * (w.ndim - 1))
    return (1.0 - e) * w + e * (coef * d)


@_op("hebb_update")
def _f_hebb_update(v, ctx):
    w, p, q, eta, coef = v
    if (
        w.ndim != 3
        or p.ndim != 2
        or q.ndim != 2
        or eta.ndim != 1
        or w.shape != (p.shape[0], p.shape[1], q.shape[1])
        or eta.shape[0] != w.shape[0]
        or coef.shape != w.shape[1:]
    ):
        _bad("hebb_update", w, p, q, eta, coef)
    e = eta.reshape(-1, 1, 1)
    return (1.0 - e) * w + e * (coef * (p[:, :, None] * q[:, None, :]))


# ---------------------------------------------------------------------------
# backward rules
#
# Each rule receives an emitter E and returns one gradient (or None) per
# parent. Rules only use E.op/E.const, so the same rule emits tape nodes in
# graph mode and plain arrays in raw mode.
# ---------------------------------------------------------------------------

_BACKWARD: dict[str, Callable] = {}


def _bw(name):
    def deco(fn):
        _BACKWARD[name] = fn
        return fn

    return deco


@_bw("matmul")
def _b_matmul(E, ctx, out, par, g):
    a, b = par
    ar, br = E.value(a).ndim, E.value(b).ndim
    if ar == 2 and br == 2:
        return (
            E.op("matmul", g, E.op("transpose", b)),
            E.op("matmul", E.op("transpose", a), g),
        )
    if ar == 2 and br == 1:
        return (E.op("outer", g, b), E.op("matmul", E.op("transpose", a), g))
    # ar == 1, br == 2
    return (E.op("matmul", b, g), E.op("outer", a, g))


@_bw("transpose")
def _b_transpose(E, ctx, out, par, g):
    return (E.op("transpose", g),)


@_bw("add")
def _b_add(E, ctx, out, par, g):
    return (g, g)


@_bw("subtract")
def _b_subtract(E, ctx, out, par, g):
    return (g, E.op("smul", g, ctx=-1.0))


@_bw("multiply")
def _b_multiply(E, ctx, out, par, g):
    a, b = par
    return (E.op("multiply", g, b), E.op("multiply", g, a))


@_bw("smul")
def _b_smul(E, ctx, out, par, g):
    return (E.op("smul", g, ctx=ctx),)


@_bw("tsmul")
def _b_tsmul(E, ctx, out, par, g):
    a, s = par
    return (E.op("tsmul", g, s), E.op("sum", E.op("multiply", g, a)))


@_bw("concat")
def _b_concat(E, ctx, out, par, g):
    grads, off = [], 0
    for a in par:
        n = E.value(a).shape[0]
        grads.append(E.op("slice", g, ctx=(off, off + n)))
        off += n
    return tuple(grads)


@_bw("slice")
def _b_slice(E, ctx, out, par, g):
    start, _ = ctx
    total = E.value(par[0]).shape[0]
    return (E.op("embed", g, ctx=(start, total)),)


@_bw("embed")
def _b_embed(E, ctx, out, par, g):
    start, _ = ctx
    n = E.value(par[0]).shape[0]
    return (E.op("slice", g, ctx=(start, start + n)),)


@_bw("sum")
def _b_sum(E, ctx, out, par, g):
    return (E.op("fill", g, ctx=E.value(par[0]).shape),)


@_bw("mean")
def _b_mean(E, ctx, out, par, g):
    x = E.value(par[0])
    return (E.op("fill", E.op("smul", g, ctx=1.0 / x.size), ctx=x.shape),)


@_bw("sumsq")
def _b_sumsq(E, ctx, out, par, g):
    return (E.op("tsmul", par[0], E.op("smul", g, ctx=2.0)),)


@_bw("square")
def _b_square(E, ctx, out, par, g):
    return (E.op("multiply", g, E.op("smul", par[0], ctx=2.0)),)


@_bw("sqrt")
def _b_sqrt(E, ctx, out, par, g):
    return (E.op("multiply", g, E.op("smul", E.op("reciprocal", out), ctx=0.5)),)


@_bw("sigmoid")
def _b_sigmoid(E, ctx, out, par, g):
    return (E.op("multiply", g, E.op("subtract", out, E.op("square", out))),)


@_bw("tanh")
def _b_tanh(E, ctx, out, par, g):
    ones = E.const(np.ones(E.value(out).shape))
    return (E.op("multiply", g, E.op("subtract", ones, E.op("square", out))),)


@_bw("relu")
def _b_relu(E, ctx, out, par, g):
    mask = (E.value(par[0]) > 0).astype(np.float64)
    return (E.op("multiply", g, E.const(mask)),)


@_bw("exp")
def _b_exp(E, ctx, out, par, g):
    return (E.op("multiply", g, out),)


@_bw("log")
def _b_log(E, ctx, out, par, g):
    return (E.op("multiply", g, E.op("reciprocal", par[0])),)


@_bw("reciprocal")
def _b_reciprocal(E, ctx, out, par, g):
    return (E.op("smul", E.op("multiply", g, E.op("square", out)), ctx=-1.0),)


@_bw("outer")
def _b_outer(E, ctx, out, par, g):
    u, w = par
    return (E.op("matmul", g, w), E.op("matmul", E.op("transpose", g), u))


@_bw("l2norm")
def _b_l2norm(E, ctx, out, par, g):
    # Undefined at exactly zero norm; callers keep norm inputs away from 0.
    return (E.op("tsmul", par[0], E.op("multiply", g, E.op("reciprocal", out))),)


@_bw("minc")
def _b_minc(E, ctx, out, par, g):
    mask = (E.value(par[0]) <= ctx).astype(np.float64)
    return (E.op("multiply", g, E.const(mask)),)


@_bw("fill")
def _b_fill(E, ctx, out, par, g):
    return (E.op("sum", g),)


@_bw("bvm")
def _b_bvm(E, ctx, out, par, g):
    w, p = par
    return (E.op("bouter", p, g), E.op("bmv", w, g))


@_bw("bmv")
def _b_bmv(E, ctx, out, par, g):
    w, q = par
    return (E.op("bouter", g, q), E.op("bvm", w, g))


@_bw("bouter")
def _b_bouter(E, ctx, out, par, g):
    u, w = par
    return (E.op("bmv", g, w), E.op("bvm", g, u))


@_bw("add0")
def _b_add0(E, ctx, out, par, g):
    return (g, E.op("sum0", g))


@_bw("mul0")
def _b_mul0(E, ctx, out, par, g):
    x, a = par
    return (E.op("mul0", g, a), E.op("sum0", E.op("multiply", g, x)))


@_bw("sum0")
def _b_sum0(E, ctx, out, par, g):
    return (E.op("bcast0", g, ctx=E.value(par[0]).shape[0]),)


@_bw("bcast0")
def _b_bcast0(E, ctx, out, par, g):
    return (E.op("sum0", g),)


@_bw("bscale")
def _b_bscale(E, ctx, out, par, g):
    x, t = par
    return (E.op("bscale", g, t), E.op("bsum", E.op("multiply", g, x)))


@_bw("bsum")
def _b_bsum(E, ctx, out, par, g):
    return (E.op("bexpand", g, ctx=E.value(par[0]).shape[1:]),)


@_bw("bsumsq")
def _b_bsumsq(E, ctx, out, par, g):
    return (E.op("bscale", par[0], E.op("smul", g, ctx=2.0)),)


@_bw("bexpand")
def _b_bexpand(E, ctx, out, par, g):
    return (E.op("bsum", g),)


@_bw("col")
def _b_col(E, ctx, out, par, g):
    n = E.value(par[0]).shape[1]
    return (E.op("pcol", g, ctx=(n, ctx)),)


@_bw("pcol")
def _b_pcol(E, ctx, out, par, g):
    return (E.op("col", g, ctx=ctx[1]),)


@_bw("cols")
def _b_cols(E, ctx, out, par, g):
    n = E.value(par[0]).shape[1]
    return (E.op("pcols", g, ctx=(n, ctx[0])),)


@_bw("pcols")
def _b_pcols(E, ctx, out, par, g):
    a = ctx[1]
    k = E.value(par[0]).shape[1]
    return (E.op("cols", g, ctx=(a, a + k)),)


def _scale_by(E, g, eta, batched):
    return E.op("bscale", g, eta) if batched else E.op("tsmul", g, eta)


@_bw("plastic_update")
def _b_plastic_update(E, ctx, out, par, g):
    w, d, eta, coef = par
    batched = E.value(eta).ndim == 1
    mulc = "mul0" if E.value(coef).ndim < E.value(w).ndim else "multiply"
    one_minus = E.op("subtract", E.const(np.ones(E.value(eta).shape)), eta)
    gw = _scale_by(E, g, one_minus, batched)
    gs = _scale_by(E, g, eta, batched)
    gd = E.op(mulc, gs, coef)
    gcoef = E.op("multiply", gs, d)
    if mulc == "mul0":
        gcoef = E.op("sum0", gcoef)
    diff = E.op("subtract", E.op(mulc, d, coef), w)
    geta_full = E.op("multiply", g, diff)
    geta = E.op("bsum", geta_full) if batched else E.op("sum", geta_full)
    return (gw, gd, geta, gcoef)


@_bw("hebb_update")
def _b_hebb_update(E, ctx, out, par, g):
    w, p, q, eta, coef = par
    pq = E.op("bouter", p, q)
    one_minus = E.op("subtract", E.const(np.ones(E.value(eta).shape)), eta)
    gw = E.op("bscale", g, one_minus)
    gs = E.op("bscale", g, eta)
    gd = E.op("mul0", gs, coef)
    gp = E.op("bmv", gd, q)
    gq = E.op("bvm", gd, p)
    gcoef = E.op("sum0", E.op("multiply", gs, pq))
    diff = E.op("subtract", E.op("mul0", pq, coef), w)
    geta = E.op("bsum", E.op("multiply", g, diff))
    return (gw, gp, gq, geta, gcoef)


# ---------------------------------------------------------------------------
# emitters
# ---------------------------------------------------------------------------


class _GraphEmitter:
    """Backward-rule emitter that records new tape nodes."""

    __slots__ = ("tape",)

    def __init__(self, tape):
        self.tape = tape

    def op(self, kind, *xs, ctx=None):
        return self.tape.record(kind, *xs, ctx=ctx)

    def const(self, arr):
        return self.tape.constant(arr)

    @staticmethod
    def value(h):
        return h.data


class _RawEmitter:
    """Backward-rule emitter that computes plain arrays (no recording)."""

    __slots__ = ()

    @staticmethod
    def op(kind, *xs, ctx=None):
        return _FORWARD[kind](tuple(xs), ctx)

    @staticmethod
    def const(arr):
        return np.asarray(arr, dtype=np.float64)

    @staticmethod
    def value(h):
        return h


# ---------------------------------------------------------------------------
# tape
# ---------------------------------------------------------------------------


class Tape:
    """Append-only record of one trial's computation.

    A tape has a single owner while recording. After the owning outer-loop
    step it is discarded whole; nothing is freed mid-trial.
    """

    __slots__ = ("nodes",)

    def __init__(self):
        self.nodes: list[Node] = []

    def __len__(self):
        return len(self.nodes)

    def _append(self, op, parents, value, ctx) -> Tensor:
        self.nodes.append(Node(op, parents, value, ctx))
        return Tensor(value, self, len(self.nodes) - 1)

    def leaf(self, value) -> Tensor:
        """A parameter/input node: a differentiation endpoint."""
        return self._append("leaf", (), _as_f64(value).copy(), None)

    def constant(self, value) -> Tensor:
        """A node whose gradient is never requested (masks, data, seeds)."""
        return self._append("const", (), _as_f64(value).copy(), None)

    def record(self, kind, *operands, ctx=None) -> Tensor:
        """Validate shapes, compute the op eagerly and append its node."""
        fwd = _FORWARD.get(kind)
        if fwd is None:
            raise GraphError(f"unknown op kind {kind!r}")
        parents = []
        values = []
        for x in operands:
            if not isinstance(x, Tensor):
                x = self.constant(x)
            elif x.tape is not self:
                raise GraphError(f"operand of {kind!r} belongs to a different tape")
            parents.append(x.node)
            values.append(x.data)
        out = fwd(tuple(values), ctx)
        return self._append(kind, tuple(parents), out, ctx)

    # -- differentiation ----------------------------------------------------

    def grad(self, scalar: Tensor, wrt: Sequence[Tensor], create_graph: bool = True) -> list[Tensor]:
        """Reverse-mode gradients of a rank-0 tensor w.r.t. ``wrt`` nodes.

        With ``create_graph=True`` the backward pass is recorded on this
        tape, so the returned tensors can be differentiated again. Targets
        may be interior nodes; they are treated as the independent variables
        of this differentiation. Unreachable targets get exact zeros.
        """
        if scalar.tape is not self or scalar.node is None:
            raise GraphError("grad target must be recorded on this tape")
        if scalar.data.ndim != 0:
            raise GraphError(f"grad target must be rank-0, got shape {scalar.data.shape}")
        ids = []
        for t in wrt:
            if not isinstance(t, Tensor) or t.tape is not self or t.node is None:
                raise GraphError("every wrt entry must be a tensor on this tape")
            ids.append(t.node)

        sid = scalar.node
        wanted = {i for i in ids if i <= sid}
        nodes = self.nodes
        depends = bytearray(sid + 1)
        lo = sid
        if wanted:
            lo = min(wanted)
            for i in wanted:
                depends[i] = 1
            for i in range(lo, sid + 1):
                if depends[i]:
                    continue
                for p in nodes[i].parents:
                    if depends[p]:
                        depends[i] = 1
                        break

        E = _GraphEmitter(self) if create_graph else _RawEmitter()
        adjoint: dict[int, object] = {}
        if depends[sid]:
            adjoint[sid] = E.const(np.ones(()))
        for i in range(sid, lo - 1, -1):
            g = adjoint.get(i)
            if g is None:
                continue
            node = nodes[i]
            if node.parents:
                if create_graph:
                    out_h = Tensor(node.value, self, i)
                    par_h = tuple(Tensor(nodes[p].value, self, p) for p in node.parents)
                else:
                    out_h = node.value
                    par_h = tuple(nodes[p].value for p in node.parents)
                pgrads = _BACKWARD[node.op](E, node.ctx, out_h, par_h, g)
                for p, pg in zip(node.parents, pgrads):
                    if pg is None or not depends[p]:
                        continue
                    cur = adjoint.get(p)
                    adjoint[p] = pg if cur is None else E.op("add", cur, pg)
            if i not in wanted:
                adjoint.pop(i, None)

        results = []
        for t, i in zip(wrt, ids):
            g = adjoint.get(i)
            if g is None:
                g = E.const(np.zeros(t.data.shape))
            results.append(g if create_graph else Tensor(np.asarray(g)))
        return results

    # -- integrity ----------------------------------------------------------

    def replay(self) -> None:
        """Recompute every non-leaf node from its parents; values must match
        the recorded ones bit-exactly."""
        for i, node in enumerate(self.nodes):
            if not node.parents:
                continue
            vals = tuple(self.nodes[p].value for p in node.parents)
            out = _FORWARD[node.op](vals, node.ctx)
            if out.shape != node.value.shape or out.tobytes() != node.value.tobytes():
                raise GraphError(f"replay mismatch at node {i} ({node.op})")


def grad(scalar: Tensor, wrt: Sequence[Tensor], create_graph: bool = True) -> list[Tensor]:
    """Module-level convenience for ``scalar.tape.grad``."""
    if scalar.tape is None:
        raise GraphError("grad target is not bound to a tape")
    return scalar.tape.grad(scalar, wrt, create_graph=create_graph)


def finite_difference_oracle(fn: Callable[[np.ndarray], float], point, epsilon: float = 1e-5) -> np.ndarray:
    """Central-difference gradient estimate of a scalar-valued function.

    Deliberately independent of the tape machinery: ``fn`` maps a plain
    float64 array to a float, and each coordinate is probed with
    ``(f(x + eps e_i) - f(x - eps e_i)) / (2 eps)``.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    x = np.asarray(point, dtype=np.float64)
    flat = x.ravel()
    out = np.zeros_like(flat)
    for i in range(flat.size):
        bumped = flat.copy()
        bumped[i] = flat[i] + epsilon
        hi = float(fn(bumped.reshape(x.shape)))
        bumped[i] = flat[i] - epsilon
        lo = float(fn(bumped.reshape(x.shape)))
        out[i] = (hi - lo) / (2.0 * epsilon)
    return out.reshape(x.shape)
