import numpy as np
import pytest

from plasticrnn.autodiff import Tape, finite_difference_oracle
from plasticrnn.plasticity import (
    InternalLossHead,
    NeuromodConfig,
    PlasticLayer,
    apply_update,
    compute_eta,
    compute_eta_from_normsq,
    delta_norm_hebbian,
    gradient_deltas,
    gradient_normsq,
    hebbian_delta,
    hebbian_normsq,
    internal_loss,
    plastic_linear_forward,
)


def _layer(tape, w, b=None, act="identity", w_plastic=None, b_plastic=None, alpha=None, beta=None):
    w = np.asarray(w, dtype=np.float64)
    lay = PlasticLayer(
        name="t",
        in_dim=w.shape[0],
        out_dim=w.shape[1],
        w_static=tape.leaf(w),
        b_static=None if b is None else tape.leaf(b),
        activation=act,
        alpha=None if alpha is None else tape.leaf(alpha),
        beta=None if beta is None else tape.leaf(beta),
    )
    if w_plastic is not None:
        lay.w_plastic = tape.constant(w_plastic)
        lay.coef_w = lay.alpha if lay.alpha is not None else tape.constant(np.ones(w.shape))
    if b_plastic is not None:
        lay.b_plastic = tape.constant(b_plastic)
        lay.coef_b = lay.beta if lay.beta is not None else tape.constant(np.ones(w.shape[1]))
    return lay


class TestPlasticLinearForward:
    def test_identity_layer(self):
        t = Tape()
        lay = _layer(t, np.eye(2))
        q, _ = plastic_linear_forward(lay, t.constant([1.0, 2.0]))
        assert np.array_equal(q.data, [1.0, 2.0])

    def test_plastic_only_relu(self):
        t = Tape()
        lay = _layer(t, np.zeros((2, 1)), act="relu", w_plastic=[[0.5], [0.0]])
        q, _ = plastic_linear_forward(lay, t.constant([1.0, 0.0]))
        assert np.array_equal(q.data, [0.5])

    def test_static_plus_plastic_with_bias(self):
        t = Tape()
        lay = _layer(t, [[1.0], [1.0]], b=[0.5], act="relu", w_plastic=[[-2.0], [0.0]])
        q, pre = plastic_linear_forward(lay, t.constant([1.0, 1.0]))
        assert pre.data == pytest.approx([0.5])
        assert q.data == pytest.approx([0.5])

    def test_batched_matches_unbatched(self):
        rng = np.random.default_rng(0)
        w, b = rng.uniform(-1, 1, (3, 2)), rng.uniform(-1, 1, 2)
        wp = rng.uniform(-1, 1, (4, 3, 2))
        p = rng.uniform(-1, 1, (4, 3))
        t = Tape()
        lay = _layer(t, w, b=b, act="tanh", w_plastic=wp)
        qb, _ = plastic_linear_forward(lay, t.constant(p))
        for i in range(4):
            t2 = Tape()
            lay2 = _layer(t2, w, b=b, act="tanh", w_plastic=wp[i])
            q, _ = plastic_linear_forward(lay2, t2.constant(p[i]))
            assert np.allclose(qb.data[i], q.data, atol=1e-15)


class TestHebbianDelta:
    def test_unit_case(self):
        t = Tape()
        d = hebbian_delta(t.constant([1.0, 0.0]), t.constant([0.5]))
        assert np.array_equal(d.data, [[0.5], [0.0]])

    def test_zero_pre(self):
        t = Tape()
        d = hebbian_delta(t.constant([0.0, 0.0]), t.constant([1.0, 2.0]))
        assert np.all(d.data == 0.0)

    def test_hand_outer(self):
        t = Tape()
        d = hebbian_delta(t.constant([1.0, 2.0]), t.constant([3.0, -1.0]))
        assert np.array_equal(d.data, [[3.0, -1.0], [6.0, -2.0]])


class TestInternalLoss:
    def test_all_ones(self):
        t = Tape()
        head = InternalLossHead(t.leaf([1.0, 1.0, 1.0]))
        assert internal_loss(t.constant([1.0, 1.0, 1.0]), head).data == 1.0

    def test_zero_output(self):
        t = Tape()
        head = InternalLossHead(t.leaf([1.0, 1.0]))
        assert internal_loss(t.constant([0.0, 0.0]), head).data == 0.0

    def test_elementwise_reading(self):
        t = Tape()
        head = InternalLossHead(t.leaf([1.0, 3.0]))
        assert internal_loss(t.constant([1.0, 2.0]), head).data == pytest.approx(18.5)

    def test_batched_matches_per_sample(self):
        rng = np.random.default_rng(1)
        o = rng.uniform(-1, 1, (5, 4))
        w = rng.uniform(-1, 1, 4)
        t = Tape()
        head = InternalLossHead(t.leaf(w))
        lb = internal_loss(t.constant(o), head)
        for i in range(5):
            t2 = Tape()
            li = internal_loss(t2.constant(o[i]), InternalLossHead(t2.leaf(w)))
            assert lb.data[i] == pytest.approx(float(li.data), rel=1e-14)


class TestComputeEta:
    def _eta(self, eta_tilde, norm, **kw):
        t = Tape()
        cfg = NeuromodConfig(**kw)
        out = compute_eta(t.leaf(eta_tilde), t.leaf(norm), cfg)
        return float(out.data)

    def test_exact_unit_values(self):
        assert self._eta(0.0, 0.5) == 0.1
        assert self._eta(0.0, 4.0) == 0.025

    def test_sigmoid_saturation(self):
        assert self._eta(60.0, 0.5) == pytest.approx(0.2, abs=1e-12)

    def test_zero_norm_takes_first_branch(self):
        assert self._eta(0.0, 0.0) == pytest.approx(0.1)

    def test_non_modulated_drops_sigmoid(self):
        assert self._eta(3.7, 0.5, modulated=False) == 0.2
        assert self._eta(-3.7, 4.0, modulated=False) == pytest.approx(0.05)

    def test_bounds_fuzzed(self):
        rng = np.random.default_rng(7)
        cfg = NeuromodConfig()
        eta_tilde = rng.uniform(-10, 10, 10_000)
        norms = np.abs(rng.standard_normal(10_000)) * rng.choice([0.01, 1.0, 100.0], 10_000)
        t = Tape()
        eta = compute_eta(t.leaf(eta_tilde), t.leaf(norms), cfg)
        assert np.all(eta.data <= cfg.eta0 + 1e-15)
        big = norms >= cfg.max_norm
        assert np.all(eta.data[big] * norms[big] <= cfg.eta0 * cfg.max_norm * (1 + 1e-12))

    def test_normsq_variant_matches(self):
        rng = np.random.default_rng(8)
        norms = np.abs(rng.standard_normal(64)) * 2
        t = Tape()
        a = compute_eta(t.leaf(np.zeros(64)), t.leaf(norms), NeuromodConfig())
        b = compute_eta_from_normsq(t.leaf(np.zeros(64)), t.leaf(norms**2), NeuromodConfig())
        assert np.allclose(a.data, b.data, rtol=1e-12)

    def test_stop_clip_gradient_detaches(self):
        t = Tape()
        cfg = NeuromodConfig(stop_clip_gradient=True)
        norm = t.leaf(4.0)
        eta = compute_eta(t.leaf(0.0), norm, cfg)
        (g,) = t.grad(eta, [norm])
        assert g.data == 0.0
        t2 = Tape()
        norm2 = t2.leaf(4.0)
        eta2 = compute_eta(t2.leaf(0.0), norm2, NeuromodConfig())
        (g2,) = t2.grad(eta2, [norm2])
        assert g2.data != 0.0


class TestDeltaNorm:
    def test_three_four_five(self):
        t = Tape()
        assert delta_norm_hebbian([t.constant([[3.0], [4.0]])]).data == 5.0

    def test_zeros(self):
        t = Tape()
        assert delta_norm_hebbian([t.constant(np.zeros((2, 2)))]).data == 0.0

    def test_two_layers(self):
        t = Tape()
        d1, d2 = t.constant([[1.0]]), t.constant([[2.0], [2.0]])
        assert delta_norm_hebbian([d1, d2]).data == 3.0

    def test_factored_normsq_matches_literal(self):
        rng = np.random.default_rng(2)
        pairs_np = [(rng.uniform(-1, 1, (4, 3)), rng.uniform(-1, 1, (4, 5))) for _ in range(3)]
        t = Tape()
        pairs = [(t.constant(p), t.constant(q)) for p, q in pairs_np]
        fast = np.sqrt(hebbian_normsq(pairs).data)
        deltas = [t.record("bouter", p, q) for p, q in pairs]
        literal = delta_norm_hebbian(deltas)
        assert np.allclose(fast, literal.data, rtol=1e-12)


class TestApplyUpdate:
    def _mk(self, w_plastic, alpha=None):
        t = Tape()
        lay = _layer(t, np.zeros((2, 1)), w_plastic=w_plastic, alpha=alpha)
        return t, lay

    def test_eta_zero_keeps_parameters(self):
        t, lay = self._mk([[0.3], [0.4]])
        before = lay.w_plastic.data.copy()
        apply_update(lay, t.constant([[9.0], [9.0]]), None, t.constant(0.0))
        assert np.array_equal(lay.w_plastic.data, before)

    def test_single_step_value(self):
        t, lay = self._mk(np.zeros((2, 1)))
        apply_update(lay, t.constant([[0.5], [0.0]]), None, t.constant(0.1))
        assert np.allclose(lay.w_plastic.data, [[0.05], [0.0]], atol=0, rtol=0)

    def test_eta_one_full_replacement(self):
        t, lay = self._mk([[0.3], [0.4]])
        delta = np.array([[1.5], [-2.0]])
        apply_update(lay, t.constant(delta), None, t.constant(1.0))
        assert np.array_equal(lay.w_plastic.data, delta)

    def test_closed_form_exact(self):
        rng = np.random.default_rng(3)
        w0 = rng.uniform(-1, 1, (3, 2))
        delta = rng.uniform(-1, 1, (3, 2))
        alpha = rng.uniform(-1, 1, (3, 2))
        eta = 0.37
        t = Tape()
        lay = _layer(t, np.zeros((3, 2)), w_plastic=w0, alpha=alpha)
        apply_update(lay, t.constant(delta), None, t.constant(eta))
        expect = (1 - eta) * w0 + eta * (alpha * delta)
        assert np.array_equal(lay.w_plastic.data, expect)

    def test_hebbian_layer_never_touches_bias(self):
        t = Tape()
        lay = _layer(t, np.zeros((2, 2)), b=[0.1, 0.2], w_plastic=np.zeros((2, 2)))
        assert lay.b_plastic is None
        apply_update(lay, t.constant(np.ones((2, 2))), t.constant(np.ones(2)), t.constant(0.5))
        assert np.array_equal(lay.b_static.data, [0.1, 0.2])
        assert lay.b_plastic is None

    def test_fixed_point_decay(self):
        t = Tape()
        lay = _layer(t, np.zeros((2, 2)), w_plastic=np.full((2, 2), 0.8))
        eta = t.constant(0.25)
        zero = t.constant(np.zeros((2, 2)))
        norms = []
        for _ in range(5):
            apply_update(lay, zero, None, eta)
            norms.append(np.linalg.norm(lay.w_plastic.data))
        ratios = np.array(norms[1:]) / np.array(norms[:-1])
        assert np.allclose(ratios, 0.75, rtol=1e-12)


class TestGradientDeltas:
    def test_last_linear_layer_is_hebbian(self):
        # gradient-rule delta of the readout equals p (q o v)^T with
        # v = 2 w_out o w_out / dim(o), to 1e-10, over random states
        rng = np.random.default_rng(11)
        worst = 0.0
        for _ in range(100):
            i, o = int(rng.integers(2, 6)), int(rng.integers(2, 6))
            t = Tape()
            lay = _layer(
                t,
                rng.uniform(-1, 1, (i, o)),
                b=rng.uniform(-1, 1, o),
                w_plastic=rng.uniform(-1, 1, (i, o)),
            )
            head = InternalLossHead(t.leaf(rng.uniform(-1, 1, o)))
            p = t.constant(rng.uniform(-1, 1, i))
            q, _ = plastic_linear_forward(lay, p)
            loss = internal_loss(q, head)
            (dw, _db) = gradient_deltas(loss, [lay])[0]
            v = 2.0 * head.w_out.data * head.w_out.data / o
            expect = np.outer(p.data, q.data * v)
            worst = max(worst, float(np.max(np.abs(dw.data - expect))))
        assert worst <= 1e-10

    def test_unreachable_layer_gets_zero(self):
        t = Tape()
        used = _layer(t, np.eye(2), w_plastic=np.zeros((2, 2)))
        unused = _layer(t, np.eye(2), w_plastic=np.zeros((2, 2)))
        head = InternalLossHead(t.leaf(np.ones(2)))
        q, _ = plastic_linear_forward(used, t.constant([1.0, 2.0]))
        deltas = gradient_deltas(internal_loss(q, head), [used, unused])
        assert np.any(deltas[0][0].data != 0)
        assert np.all(deltas[1][0].data == 0)

    def test_two_layer_net_matches_fd(self):
        rng = np.random.default_rng(12)
        w1, w2 = rng.uniform(-1, 1, (4, 3)), rng.uniform(-1, 1, (3, 2))
        b1, b2 = rng.uniform(-1, 1, 3), rng.uniform(-1, 1, 2)
        wp1, wp2 = rng.uniform(-0.5, 0.5, (4, 3)), rng.uniform(-0.5, 0.5, (3, 2))
        bp1, bp2 = rng.uniform(-0.5, 0.5, 3), rng.uniform(-0.5, 0.5, 2)
        w_out = rng.uniform(-1, 1, 2)
        x = rng.uniform(-1, 1, 4)

        def run(w1p, b1p, w2p, b2p):
            t = Tape()
            l1 = _layer(t, w1, b=b1, act="tanh", w_plastic=w1p, b_plastic=b1p)
            l2 = _layer(t, w2, b=b2, w_plastic=w2p, b_plastic=b2p)
            head = InternalLossHead(t.leaf(w_out))
            h, _ = plastic_linear_forward(l1, t.constant(x))
            q, _ = plastic_linear_forward(l2, h)
            return t, [l1, l2], internal_loss(q, head)

        t, layers, loss = run(wp1, bp1, wp2, bp2)
        deltas = gradient_deltas(loss, layers)
        flat_args = [wp1, bp1, wp2, bp2]
        flat_grads = [deltas[0][0], deltas[0][1], deltas[1][0], deltas[1][1]]
        for k, (arg, g) in enumerate(zip(flat_args, flat_grads)):

            def f(v, _k=k):
                args = [a if j != _k else v for j, a in enumerate(flat_args)]
                return float(run(*args)[2].data)

            fd = finite_difference_oracle(f, arg, 1e-5)
            rel = np.max(np.abs(g.data - fd) / np.maximum(1.0, np.abs(fd)))
            assert rel < 1e-6

    def test_gradient_normsq_counts_biases(self):
        t = Tape()
        lay = _layer(
            t, np.eye(2), b=[0.0, 0.0], w_plastic=[[1.0, 0.0], [0.0, 0.0]], b_plastic=[2.0, 0.0]
        )
        total = gradient_normsq([(lay.w_plastic, lay.b_plastic)])
        assert float(total.data) == 5.0
