"""Finite-difference oracle suites for the tape.

Random composite programs are planned once (as instruction lists with shapes
tracked), then evaluated both through the tape and through the central
difference oracle, so the two paths share nothing but the program itself.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tape, Tensor, finite_difference_oracle

# Ops the random composer may emit, grouped by how operands are picked.
_UNARY_SAFE = ("square", "sigmoid", "tanh", "relu", "exp", "sqrt_pos", "log_pos", "recip_pos")
_REDUCERS = ("sum", "mean", "sumsq", "l2norm")
_KINK_OPS = {"relu", "minc"}


def _plan_random_program(rng: np.random.Generator, depth: int):
    """Plan a random scalar-valued program.

    Returns (leaf_shapes, instructions); an instruction is
    (op, arg_indices, ctx) and may also be ("const", value, None). Value
    indices count leaves first, then instruction outputs.
    """
    n_leaves = int(rng.integers(1, 4))
    dims = lambda: int(rng.integers(2, 5))
    shape_pool = [(), (dims(),), (dims(), dims())]
    leaf_shapes = [shape_pool[int(rng.integers(0, 3))] for _ in range(n_leaves)]
    shapes = list(leaf_shapes)
    instrs = []

    def emit(op, args, ctx, out_shape):
        instrs.append((op, tuple(args), ctx))
        shapes.append(out_shape)
        return len(shapes) - 1

    def emit_const(value):
        instrs.append(("const", np.asarray(value, dtype=np.float64), None))
        shapes.append(np.asarray(value).shape)
        return len(shapes) - 1

    def pick(pred):
        idx = [i for i, s in enumerate(shapes) if pred(s)]
        return int(rng.choice(idx)) if idx else None

    for _ in range(depth):
        kind = rng.integers(0, 10)
        if kind <= 2:  # unary elementwise
            i = pick(lambda s: True)
            op = _UNARY_SAFE[int(rng.integers(0, len(_UNARY_SAFE)))]
            if op in ("sqrt_pos", "log_pos", "recip_pos"):
                sq = emit("square", [i], None, shapes[i])
                off = emit_const(np.full(shapes[i], 0.5))
                pos = emit("add", [sq, off], None, shapes[i])
                emit({"sqrt_pos": "sqrt", "log_pos": "log", "recip_pos": "reciprocal"}[op], [pos], None, shapes[i])
            else:
                emit(op, [i], None, shapes[i])
        elif kind <= 4:  # binary same-shape
            i = pick(lambda s: True)
            j = pick(lambda s, t=shapes: s == t[i] if i is not None else False)
            if j is None:
                continue
            op = ("add", "subtract", "multiply")[int(rng.integers(0, 3))]
            emit(op, [i, j], None, shapes[i])
        elif kind == 5:  # scalar scaling
            i = pick(lambda s: True)
            if rng.random() < 0.5:
                emit("smul", [i], float(rng.uniform(-1.5, 1.5)), shapes[i])
            else:
                s = pick(lambda s: s == ())
                if s is not None and shapes[i] != ():
                    emit("tsmul", [i, s], None, shapes[i])
        elif kind == 6:  # matmul / outer / transpose
            m = pick(lambda s: len(s) == 2)
            v = pick(lambda s: len(s) == 1)
            r = rng.random()
            if m is not None and r < 0.4:
                emit("transpose", [m], None, shapes[m][::-1])
            elif m is not None and v is not None and shapes[m][1] == shapes[v][0]:
                emit("matmul", [m, v], None, (shapes[m][0],))
            elif v is not None:
                w = pick(lambda s: len(s) == 1)
                emit("outer", [v, w], None, (shapes[v][0], shapes[w][0]))
        elif kind == 7:  # concat / slice
            v = pick(lambda s: len(s) == 1)
            if v is None:
                continue
            if rng.random() < 0.5:
                w = pick(lambda s: len(s) == 1)
                emit("concat", [v, w], None, (shapes[v][0] + shapes[w][0],))
            else:
                n = shapes[v][0]
                a = int(rng.integers(0, n))
                b = int(rng.integers(a + 1, n + 1))
                emit("slice", [v], (a, b), (b - a,))
        elif kind == 8:  # min with constant
            i = pick(lambda s: True)
            emit("minc", [i], float(rng.uniform(-1.0, 1.0)), shapes[i])
        else:  # reduce something into the pool
            i = pick(lambda s: s != ())
            if i is None:
                continue
            op = _REDUCERS[int(rng.integers(0, len(_REDUCERS)))]
            emit(op, [i], None, ())

    # collapse everything reachable into one scalar
    acc = None
    for i, s in list(enumerate(shapes)):
        v = i if s == () else emit("mean", [i], None, ())
        acc = v if acc is None else emit("add", [acc, v], None, ())
    emit("tanh", [acc], None, ())  # keep the output magnitude tame
    return leaf_shapes, instrs


def _execute(tape: Tape, leaf_values, instrs) -> tuple[Tensor, list[Tensor]]:
    leaves = [tape.leaf(v) for v in leaf_values]
    vals: list[Tensor] = list(leaves)
    for op, args, ctx in instrs:
        if op == "const":
            vals.append(tape.constant(args))
        else:
            vals.append(tape.record(op, *(vals[a] for a in args), ctx=ctx))
    return vals[-1], leaves


def _kink_adjacent(tape: Tape, margin: float) -> bool:
    for node in tape.nodes:
        if node.op in _KINK_OPS:
            x = tape.nodes[node.parents[0]].value
            c = node.ctx if node.op == "minc" else 0.0
            if np.any(np.abs(x - c) < margin):
                return True
        elif node.op == "l2norm" and node.value < margin:
            # l2norm's derivative blows up at the origin
            return True
    return False


def _rel_err(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.max(np.abs(a - b) / np.maximum(1.0, np.abs(b)))) if a.size else 0.0


def check_first_order(n_graphs: int = 120, seed: int = 0, eps: float = 1e-5) -> float:
    """Max relative error of grad() vs central differences over random graphs."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    done = 0
    while done < n_graphs:
        leaf_shapes, instrs = _plan_random_program(rng, depth=int(rng.integers(4, 9)))
        leaf_values = [rng.uniform(-2.0, 2.0, s) for s in leaf_shapes]
        tape = Tape()
        out, leaves = _execute(tape, leaf_values, instrs)
        if not np.isfinite(out.data) or _kink_adjacent(tape, 1e-3):
            continue
        grads = tape.grad(out, leaves, create_graph=True)

        for i, base in enumerate(leaf_values):

            def f(v, _i=i):
                vals = [x if j != _i else v for j, x in enumerate(leaf_values)]
                t = Tape()
                o, _ = _execute(t, vals, instrs)
                return float(o.data)

            fd = finite_difference_oracle(f, base, eps)
            worst = max(worst, _rel_err(grads[i].data, fd))
        done += 1
    return worst


def check_second_order(n_graphs: int = 60, seed: int = 1, eps: float = 1e-4) -> float:
    """Max relative error of grad(grad()) vs central differences of grad()."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    done = 0
    while done < n_graphs:
        leaf_shapes, instrs = _plan_random_program(rng, depth=int(rng.integers(3, 7)))
        leaf_values = [rng.uniform(-2.0, 2.0, s) for s in leaf_shapes]
        tape = Tape()
        out, leaves = _execute(tape, leaf_values, instrs)
        if not np.isfinite(out.data) or _kink_adjacent(tape, 1e-3):
            continue
        g0 = tape.grad(out, leaves, create_graph=True)
        d = tape.record("sum", g0[0]) if g0[0].rank else g0[0]
        gg = tape.grad(d, leaves, create_graph=True)

        for i, base in enumerate(leaf_values):

            def f(v, _i=i):
                vals = [x if j != _i else v for j, x in enumerate(leaf_values)]
                t = Tape()
                o, lv = _execute(t, vals, instrs)
                g = t.grad(o, lv, create_graph=True)[0]
                return float(g.data.sum())

            fd = finite_difference_oracle(f, base, eps)
            worst = max(worst, _rel_err(gg[i].data, fd))
        done += 1
    return worst


# ---------------------------------------------------------------------------
# batched-op checks: one targeted graph per kind, both orders
# ---------------------------------------------------------------------------


def _batched_cases(rng: np.random.Generator):
    b, i, o = 3, 4, 2
    u = lambda *s: rng.uniform(-1.5, 1.5, s)
    pos = lambda *s: rng.uniform(0.05, 0.9, s)

    def case(name, leaf_values, build):
        return name, leaf_values, build

    yield case("bvm", [u(b, i, o), u(b, i)], lambda R, W, p: R("bvm", W, p))
    yield case("bmv", [u(b, i, o), u(b, o)], lambda R, W, q: R("bmv", W, q))
    yield case("bouter", [u(b, i), u(b, o)], lambda R, p, q: R("bouter", p, q))
    yield case("add0", [u(b, i, o), u(i, o)], lambda R, X, A: R("add0", X, A))
    yield case("mul0", [u(b, i, o), u(i, o)], lambda R, X, A: R("mul0", X, A))
    yield case("sum0", [u(b, i, o)], lambda R, X: R("sum0", X))
    yield case("bcast0", [u(i, o)], lambda R, A: R("bcast0", A, ctx=b))
    yield case("bscale", [u(b, i, o), u(b)], lambda R, X, t: R("bscale", X, t))
    yield case("bsum", [u(b, i, o)], lambda R, X: R("bsum", X))
    yield case("bsumsq", [u(b, i, o)], lambda R, X: R("bsumsq", X))
    yield case("bexpand", [u(b)], lambda R, t: R("bexpand", t, ctx=(i, o)))
    yield case("col", [u(b, o)], lambda R, X: R("col", X, ctx=1))
    yield case("pcol", [u(b)], lambda R, t: R("pcol", t, ctx=(o, 1)))
    yield case("cols", [u(b, i)], lambda R, X: R("cols", X, ctx=(1, 3)))
    yield case("pcols", [u(b, i)], lambda R, Y: R("pcols", Y, ctx=(i + 2, 1)))
    yield case(
        "plastic_update",
        [u(b, i, o), u(b, i, o), pos(b), u(i, o)],
        lambda R, w, d, e, a: R("plastic_update", w, d, e, a),
    )
    yield case(
        "plastic_update_flat",
        [u(i, o), u(i, o), pos(), u(i, o)],
        lambda R, w, d, e, a: R("plastic_update", w, d, e, a),
    )
    yield case(
        "hebb_update",
        [u(b, i, o), u(b, i), u(b, o), pos(b), u(i, o)],
        lambda R, w, p, q, e, a: R("hebb_update", w, p, q, e, a),
    )


def check_batched_ops(n_draws: int = 5, seed: int = 2, eps: float = 1e-5) -> float:
    """First and second order fd check of every batched/fused op kind."""
    worst = 0.0
    for draw in range(n_draws):
        rng = np.random.default_rng(seed * 1000 + draw)
        for name, leaf_values, build in _batched_cases(rng):

            def run(values, order):
                tape = Tape()
                leaves = [tape.leaf(v) for v in values]
                out = build(tape.record, *leaves)
                s = tape.record("sum", out) if out.rank else out
                if order == 0:
                    return float(s.data), None, None
                g1 = tape.grad(s, leaves, create_graph=True)
                if order == 1:
                    return None, g1, leaves
                d = tape.record("sum", g1[0]) if g1[0].rank else g1[0]
                g2 = tape.grad(d, leaves, create_graph=True)
                return None, g2, leaves

            _, g1, leaves = run(leaf_values, 1)
            _, g2, _ = run(leaf_values, 2)
            for i, base in enumerate(leaf_values):

                def f1(v, _i=i):
                    vals = [x if j != _i else v for j, x in enumerate(leaf_values)]
                    return run(vals, 0)[0]

                def f2(v, _i=i):
                    vals = [x if j != _i else v for j, x in enumerate(leaf_values)]
                    _, g, _ = run(vals, 1)
                    return float(g[0].data.sum())

                worst = max(worst, _rel_err(g1[i].data, finite_difference_oracle(f1, base, eps)))
                worst = max(worst, _rel_err(g2[i].data, finite_difference_oracle(f2, base, 1e-4)))
    return worst
