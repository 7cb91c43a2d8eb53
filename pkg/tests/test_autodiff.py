import numpy as np
import pytest

from plasticrnn.autodiff import (
    GraphError,
    ShapeError,
    Tape,
    finite_difference_oracle,
    grad,
)
from plasticrnn import gradcheck


def test_matmul_matrix_vector():
    t = Tape()
    a = t.leaf([[1.0, 2.0], [3.0, 4.0]])
    b = t.leaf([1.0, 1.0])
    out = t.record("matmul", a, b)
    assert np.array_equal(out.data, [3.0, 7.0])


def test_sigmoid_at_zero():
    t = Tape()
    out = t.record("sigmoid", t.leaf(0.0))
    assert out.data == 0.5


def test_outer_unit_vector():
    t = Tape()
    out = t.record("outer", t.leaf([1.0, 0.0]), t.leaf([0.5]))
    assert np.array_equal(out.data, [[0.5], [0.0]])


def test_shape_mismatch_names_op_and_shapes():
    t = Tape()
    with pytest.raises(ShapeError, match=r"matmul.*\(2, 2\).*\(3,\)"):
        t.record("matmul", t.leaf(np.eye(2)), t.leaf(np.zeros(3)))
    with pytest.raises(ShapeError, match="add"):
        t.record("add", t.leaf(np.zeros(2)), t.leaf(np.zeros(3)))


def test_cross_tape_operand_rejected():
    t1, t2 = Tape(), Tape()
    x = t1.leaf(1.0)
    with pytest.raises(GraphError):
        t2.record("square", x)


def test_grad_of_square():
    t = Tape()
    x = t.leaf(3.0)
    (g,) = t.grad(t.record("square", x), [x])
    assert g.data == 6.0
    assert g.node is not None and g.tape is t


def test_second_derivative_of_cube():
    t = Tape()
    x = t.leaf(2.0)
    cube = t.record("multiply", t.record("square", x), x)
    (g1,) = t.grad(cube, [x])
    (g2,) = t.grad(g1, [x])
    assert g2.data == pytest.approx(12.0, abs=1e-12)


def test_grad_weighted_square_sum():
    # L = (1/3) sum_i (w_i o_i)^2 at w = (1,1,1), o = (1,2,3)
    t = Tape()
    w = t.leaf([1.0, 1.0, 1.0])
    o = t.constant([1.0, 2.0, 3.0])
    loss = t.record("mean", t.record("square", t.record("multiply", w, o)))
    (g,) = t.grad(loss, [w])
    expect = [2.0 / 3.0, 8.0 / 3.0, 6.0]
    assert np.allclose(g.data, expect, rtol=0, atol=1e-12)
    fd = finite_difference_oracle(
        lambda v: float(((v * np.array([1.0, 2.0, 3.0])) ** 2).mean()), np.ones(3), 1e-5
    )
    assert np.allclose(g.data, fd, rtol=1e-6, atol=1e-7)


def test_fd_oracle_square():
    g = finite_difference_oracle(lambda v: float(v**2), 3.0, 1e-5)
    assert abs(float(g) - 6.0) <= 1e-8


def test_fd_oracle_sigmoid():
    g = finite_difference_oracle(lambda v: float(1.0 / (1.0 + np.exp(-v))), 0.0, 1e-5)
    assert abs(float(g) - 0.25) <= 1e-9


def test_grad_requires_scalar():
    t = Tape()
    x = t.leaf([1.0, 2.0])
    with pytest.raises(GraphError):
        t.grad(x, [x])


def test_unreachable_leaf_grad_is_exactly_zero():
    t = Tape()
    x = t.leaf(1.5)
    y = t.leaf([2.0, 3.0])
    loss = t.record("square", x)
    gx, gy = t.grad(loss, [x, y])
    assert gx.data == 3.0
    assert gy.shape == (2,)
    assert np.all(gy.data == 0.0)


def test_grad_wrt_interior_node():
    # d/dh of (2h)^2 at the interior node h = x + 1, x = 1  ->  8h = 16
    t = Tape()
    x = t.leaf(1.0)
    h = t.record("add", x, t.constant(1.0))
    y = t.record("square", t.record("smul", h, ctx=2.0))
    (gh,) = t.grad(y, [h])
    assert gh.data == pytest.approx(16.0)


def test_relu_zero_curvature():
    for x0 in (-1.3, 0.7, 2.0):
        t = Tape()
        x = t.leaf(x0)
        y = t.record("smul", t.record("relu", x), ctx=3.0)
        (g1,) = t.grad(y, [x])
        (g2,) = t.grad(g1, [x])
        assert g2.data == 0.0


def test_minc_tie_selects_nonconstant_branch():
    t = Tape()
    x = t.leaf(1.0)
    y = t.record("minc", x, ctx=1.0)
    (g,) = t.grad(y, [x])
    assert g.data == 1.0


def test_tape_replay_bit_exact():
    rng = np.random.default_rng(0)
    t = Tape()
    a = t.leaf(rng.uniform(-1, 1, (3, 3)))
    b = t.leaf(rng.uniform(-1, 1, (3,)))
    h = t.record("tanh", t.record("matmul", a, b))
    s = t.record("sumsq", h)
    t.grad(s, [a, b], create_graph=True)
    t.replay()


def test_raw_mode_matches_graph_mode():
    rng = np.random.default_rng(3)
    t = Tape()
    a = t.leaf(rng.uniform(-1, 1, (4, 3)))
    b = t.leaf(rng.uniform(-1, 1, (3,)))
    out = t.record("sumsq", t.record("sigmoid", t.record("matmul", a, b)))
    g_graph = t.grad(out, [a, b], create_graph=True)
    g_raw = t.grad(out, [a, b], create_graph=False)
    for gg, gr in zip(g_graph, g_raw):
        assert np.array_equal(gg.data, gr.data)
    assert g_raw[0].tape is None


def test_first_order_random_graph_oracle():
    worst = gradcheck.check_first_order(n_graphs=120, seed=0)
    assert worst < 1e-6


def test_second_order_random_graph_oracle():
    worst = gradcheck.check_second_order(n_graphs=60, seed=1)
    assert worst < 1e-5


def test_batched_op_oracle():
    worst = gradcheck.check_batched_ops(n_draws=4, seed=2)
    assert worst < 1e-5
