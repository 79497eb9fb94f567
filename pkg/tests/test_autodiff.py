"""Reverse-mode machinery: tape invariants, backward rules, gradcheck."""

import numpy as np
import pytest

from mgunet import ops
from mgunet.errors import ContractError, DeterminismError
from mgunet.gradcheck import gradcheck
from mgunet.tensor import Tape, Tensor, backward, no_grad, record


def t(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


class TestBackwardBasics:
    def test_sum_gives_ones(self, rng):
        x = t(rng.standard_normal((3, 5)), grad=True)
        with Tape():
            loss = ops.reduce_sum(x)
        backward(loss)
        assert np.array_equal(x.grad, np.ones((3, 5)))

    def test_sum_of_squares_gives_2x(self, rng):
        x = t(rng.standard_normal((4, 4)), grad=True)
        with Tape():
            loss = ops.reduce_sum(ops.mul(x, x))
        backward(loss)
        assert np.max(np.abs(x.grad - 2 * x.data)) < 1e-12

    def test_reuse_accumulates(self, rng):
        x = t(rng.standard_normal(6), grad=True)
        with Tape():
            loss = ops.reduce_sum(ops.add(x, x))
        backward(loss)
        assert np.array_equal(x.grad, np.full(6, 2.0))

    def test_non_scalar_loss_rejected(self, rng):
        x = t(rng.standard_normal(3), grad=True)
        with Tape():
            y = ops.scalar_mul(x, 2.0)
        with pytest.raises(ContractError):
            backward(y)

    def test_untracked_loss_rejected(self):
        with pytest.raises(ContractError):
            backward(Tensor(np.float64(1.0)))

    def test_no_grad_suppresses_recording(self, rng):
        x = t(rng.standard_normal(3), grad=True)
        with Tape() as tape:
            with no_grad():
                y = ops.scalar_mul(x, 2.0)
        assert len(tape) == 0
        assert not y.requires_grad


class TestTapeInvariants:
    def _build(self, rng):
        x = t(rng.standard_normal((2, 3, 4, 4)), grad=True)
        tape = Tape()
        with tape:
            y = ops.relu(x)
            z = ops.scalar_mul(y, 2.0)
            w = ops.add(z, y)
            loss = ops.reduce_sum(w)
        return x, tape, loss

    def test_inputs_precede_outputs(self, rng):
        _, tape, _ = self._build(rng)
        for entry in tape.entries:
            assert all(i < entry.out_id for i in entry.in_ids)

    def test_backward_visits_each_op_once_in_reverse(self, rng):
        _, tape, loss = self._build(rng)
        order = []
        for k, entry in enumerate(tape.entries):
            orig = entry.backward_fn
            entry.backward_fn = (lambda g, k=k, f=orig: (order.append(k), f(g))[1])
        backward(loss)
        assert order == list(range(len(tape.entries)))[::-1]

    def test_gradients_flow_through_shared_node(self, rng):
        x, tape, loss = self._build(rng)
        backward(loss)
        # w = 2*relu(x) + relu(x) -> d/dx = 3 on the positive side
        want = 3.0 * (x.data > 0)
        assert np.max(np.abs(x.grad - want)) < 1e-12


class TestLinearity:
    def test_backward_is_linear_in_the_loss(self, rng):
        x0 = rng.standard_normal((3, 4))

        def grad_of(a, b):
            x = t(x0, grad=True)
            with Tape():
                f = ops.reduce_sum(ops.mul(x, x))
                g = ops.reduce_sum(ops.relu(x))
                loss = ops.add(ops.scalar_mul(f, a), ops.scalar_mul(g, b))
            backward(loss)
            return x.grad

        a, b = 0.7, -1.3
        combined = grad_of(a, b)
        separate = a * grad_of(1.0, 0.0) + b * grad_of(0.0, 1.0)
        assert np.max(np.abs(combined - separate)) < 1e-10


class TestGradcheckMachinery:
    def test_linear_layer_fragment(self, rng):
        x = t(rng.standard_normal((4, 6)), grad=True)
        w = t(rng.standard_normal((6, 3)), grad=True)
        b = t(rng.standard_normal((4, 3)), grad=True)
        r = t(rng.standard_normal((4, 3)))

        def fragment():
            return ops.reduce_sum(ops.mul(ops.add(ops.matmul(x, w), b), r))

        report = gradcheck(fragment, [x, w, b], samples=30, h=1e-5, tol=1e-7, rng=rng)
        assert report.passed, report.format()

    def test_relu_away_from_kink(self, rng):
        h = 1e-5
        base = rng.uniform(0.5, 1.5, size=(5, 5)) * rng.choice([-1.0, 1.0], size=(5, 5))
        x = t(base, grad=True)
        r = t(rng.standard_normal((5, 5)))

        def fragment():
            return ops.reduce_sum(ops.mul(ops.relu(x), r))

        report = gradcheck(fragment, [x], samples=25, h=h, tol=1e-6, rng=rng)
        assert report.passed, report.format()

    def test_nondeterministic_fragment_detected(self, rng):
        x = t(np.ones(3), grad=True)

        def fragment():
            return ops.reduce_sum(ops.scalar_mul(x, float(np.random.default_rng().random())))

        with pytest.raises(DeterminismError):
            gradcheck(fragment, [x], samples=2)

    def test_corrupted_backward_detected(self, rng):
        x = t(rng.standard_normal(5), grad=True)

        def broken_double(v):
            # forward computes 2v but claims d/dv = 3
            return record("broken_double", (v,), v.data * 2.0, lambda g: (g * 3.0,))

        def fragment():
            return ops.reduce_sum(broken_double(x))

        report = gradcheck(fragment, [x], samples=5, tol=1e-6, rng=rng)
        assert not report.passed
        assert report.max_rel_err > 0.1

    def test_max_pool_tie_routes_to_first_element(self):
        x = t(np.full((1, 1, 2, 2), 7.0), grad=True)
        with Tape():
            loss = ops.reduce_sum(ops.max_pool2d(x, (2, 2)))
        backward(loss)
        want = np.zeros((1, 1, 2, 2))
        want[0, 0, 0, 0] = 1.0
        assert np.array_equal(x.grad, want)

    def test_constant_pool_forward_value(self):
        x = t(np.full((1, 1, 4, 4), 2.5))
        assert np.all(ops.max_pool2d(x, (2, 2)).data == 2.5)
