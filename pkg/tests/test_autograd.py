import math

import numpy as np
import pytest

from rfop import autograd as ag
from rfop.autograd import Tape, Tensor, backward, grad_check, make_node
from rfop.checks import primitive_cases

from conftest import central_diff


def t(x, grad=True):
    return Tensor(np.array(x, dtype=float), requires_grad=grad)


class TestMatmul:
    def test_identity(self):
        a = t([[1, 2], [3, 4]])
        np.testing.assert_array_equal(ag.matmul(a, t(np.eye(2))).data, [[1, 2], [3, 4]])

    def test_zero(self):
        a = t([[1, 2], [3, 4]])
        np.testing.assert_array_equal(ag.matmul(a, t(np.zeros((2, 2)))).data, np.zeros((2, 2)))

    def test_gradient_of_sum(self):
        A, B = t([[1, 2]]), t([[3], [5]])
        backward(ag.sum_all(ag.matmul(A, B)))
        # frozen from central differences of np.sum(A @ B)
        dA = central_diff(lambda a: np.sum(a @ B.data), A.data)
        dB = central_diff(lambda b: np.sum(A.data @ b), B.data)
        np.testing.assert_allclose(dA, [[3, 5]], atol=1e-9)
        np.testing.assert_allclose(dB, [[1], [2]], atol=1e-9)
        np.testing.assert_allclose(A.grad, [[3, 5]], atol=1e-12)
        np.testing.assert_allclose(B.grad, [[1], [2]], atol=1e-12)

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ValueError, match=r"\(2, 3\).*\(2, 3\)"):
            ag.matmul(t(np.ones((2, 3))), t(np.ones((2, 3))))


class TestElementwise:
    def test_fixed_points(self):
        assert ag.tanh(t(0.0)).item() == 0.0
        assert ag.sigmoid(t(0.0)).item() == 0.5
        np.testing.assert_array_equal(ag.relu(t([-1, 2])).data, [0, 2])

    def test_tanh_derivative(self):
        x = t([0.5])
        backward(ag.sum_all(ag.tanh(x)))
        fd = central_diff(lambda v: float(np.tanh(v).sum()), [0.5])
        np.testing.assert_allclose(fd, [1 - math.tanh(0.5) ** 2], rtol=1e-9)
        np.testing.assert_allclose(x.grad, [1 - math.tanh(0.5) ** 2], rtol=1e-12)

    def test_sigmoid_extreme_inputs_stay_finite(self):
        y = ag.sigmoid(t([-1000.0, 1000.0])).data
        np.testing.assert_array_equal(y, [0.0, 1.0])

    def test_binary_shape_mismatch(self):
        for kind in ("add", "sub", "mul"):
            with pytest.raises(ValueError, match="shape mismatch"):
                ag.elementwise(kind, t(np.ones(3)), t(np.ones(4)))

    def test_scalar_times_tensor(self):
        x = t([1.0, 2.0])
        np.testing.assert_array_equal(ag.mul(3.0, x).data, [3, 6])
        s = t([2.0])
        y = ag.mul(s, x)
        backward(ag.sum_all(y))
        np.testing.assert_allclose(s.grad, [3.0])
        np.testing.assert_allclose(x.grad, [2.0, 2.0])

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            ag.elementwise("softplus", t([1.0]))


class TestL2Normalize:
    def test_345(self):
        np.testing.assert_allclose(ag.l2_normalize(t([[3, 4]])).data, [[0.6, 0.8]], rtol=1e-15)

    def test_zero_row(self):
        np.testing.assert_array_equal(ag.l2_normalize(t([[0.0, 0.0]]), 1e-12).data, [[0, 0]])

    def test_gradient_at_ones(self):
        x = t([[1.0, 1.0]])
        backward(ag.sum_all(ag.l2_normalize(x)))
        fd = central_diff(lambda v: float((v / np.linalg.norm(v)).sum()), [[1.0, 1.0]])
        np.testing.assert_allclose(x.grad, fd, atol=1e-9)

    def test_norms_bounded(self, rng):
        x = rng.normal(size=(20, 5)) * rng.uniform(0, 3, size=(20, 1))
        n = np.linalg.norm(ag.l2_normalize(t(x)).data, axis=1)
        assert np.all(n <= 1 + 1e-12)
        np.testing.assert_allclose(n, 1.0, rtol=1e-12)

    def test_eps_must_be_positive(self):
        with pytest.raises(ValueError):
            ag.l2_normalize(t([[1.0]]), 0.0)


class TestConcatChannels:
    def test_layout(self):
        np.testing.assert_array_equal(ag.concat_channels(t([[1, 2]]), t([[3, 4]])).data, [[[1, 2], [3, 4]]])

    def test_equal_inputs(self, rng):
        a = rng.normal(size=(3, 4))
        out = ag.concat_channels(t(a), t(a)).data
        np.testing.assert_array_equal(out[:, 0], out[:, 1])

    def test_backward_is_ones(self):
        a, b = t([[1, 2]]), t([[3, 4]])
        backward(ag.sum_all(ag.concat_channels(a, b)))
        np.testing.assert_array_equal(a.grad, [[1, 1]])
        np.testing.assert_array_equal(b.grad, [[1, 1]])

    def test_split_round_trip_bit_exact(self, rng):
        a, b = rng.normal(size=(5, 7)), rng.normal(size=(5, 7))
        c0, c1 = ag.split_channels(ag.concat_channels(t(a), t(b)))
        assert c0.data.tobytes() == a.tobytes()
        assert c1.data.tobytes() == b.tobytes()

    def test_mismatch(self):
        with pytest.raises(ValueError):
            ag.concat_channels(t(np.ones((2, 3))), t(np.ones((2, 4))))


def conv_oracle(x, kernel, bias):
    """Same-padded cross-correlation, one output channel, via np.correlate."""
    B, _, d = x.shape
    out = np.full((B, d), float(bias))
    for b in range(B):
        for c in range(2):
            out[b] += np.correlate(x[b, c], kernel[c], mode="same")
    return out


class TestConv1dMix:
    def test_identity_routing(self, rng):
        x = rng.normal(size=(3, 2, 5))
        out = ag.conv1d_mix(t(x), t([[1.0], [0.0]]), 0.0).data
        np.testing.assert_array_equal(out, x[:, 0])

    def test_kappa1_closed_form(self, rng):
        for _ in range(20):
            x = rng.normal(size=(4, 2, 6))
            a, b, c = rng.normal(size=3)
            out = ag.conv1d_mix(t(x), t([[a], [b]]), c).data
            np.testing.assert_allclose(out, a * x[:, 0] + b * x[:, 1] + c, atol=1e-12, rtol=0)

    def test_zero_kernel(self, rng):
        out = ag.conv1d_mix(t(rng.normal(size=(2, 2, 5))), t(np.zeros((2, 3))), 1.0).data
        np.testing.assert_array_equal(out, np.ones((2, 5)))

    @pytest.mark.parametrize("k", [1, 3, 5])
    def test_matches_correlate_oracle(self, rng, k):
        x = rng.normal(size=(3, 2, 7))
        kern = rng.normal(size=(2, k))
        np.testing.assert_allclose(ag.conv1d_mix(t(x), t(kern), 0.25).data, conv_oracle(x, kern, 0.25), atol=1e-12)

    def test_even_kernel_rejected(self):
        with pytest.raises(ValueError, match="odd"):
            ag.conv1d_mix(t(np.ones((1, 2, 4))), t(np.ones((2, 2))))

    def test_gradients_against_fd(self, rng):
        x0, k0 = rng.normal(size=(2, 2, 5)), rng.normal(size=(2, 3))
        w = rng.normal(size=(2, 5))
        x, k, c = t(x0), t(k0), t([0.3])
        backward(ag.sum_all(ag.mul(ag.conv1d_mix(x, k, c), t(w, grad=False))))
        np.testing.assert_allclose(x.grad, central_diff(lambda v: np.sum(conv_oracle(v, k0, 0.3) * w), x0), atol=1e-8)
        np.testing.assert_allclose(k.grad, central_diff(lambda v: np.sum(conv_oracle(x0, v, 0.3) * w), k0), atol=1e-8)
        np.testing.assert_allclose(c.grad, [w.sum()], atol=1e-12)


class TestBackward:
    def test_quadratic(self):
        x = t([1.0, 2.0, 3.0])
        backward(ag.sum_all(ag.mul(x, x)))
        np.testing.assert_array_equal(x.grad, [2, 4, 6])

    def test_unused_parameter_gets_zero_grad(self):
        x, unused = t([1.0, 2.0]), t([5.0, 6.0, 7.0])
        backward(ag.sum_all(x), params=[x, unused])
        np.testing.assert_array_equal(unused.grad, [0, 0, 0])

    def test_accumulates_across_uses_and_calls(self):
        x = t([1.0, -2.0])
        y = ag.add(ag.scale(x, 3.0), ag.square(x))
        backward(ag.sum_all(y))
        np.testing.assert_array_equal(x.grad, [5.0, -1.0])
        backward(ag.sum_all(ag.scale(x, 1.0)))
        np.testing.assert_array_equal(x.grad, [6.0, 0.0])

    def test_non_scalar_root_rejected(self):
        with pytest.raises(ValueError, match="scalar"):
            backward(t([1.0, 2.0]))

    def test_tape_is_topological_and_visits_once(self):
        x = t([1.0, 2.0])
        h = ag.tanh(x)
        root = ag.sum_all(ag.add(ag.mul(h, h), h))
        tape = Tape.from_root(root)
        pos = {id(n): i for i, n in enumerate(tape.nodes)}
        assert len(pos) == len(tape.nodes)
        for n in tape.nodes:
            for p in n.parents:
                assert pos[id(p)] < pos[id(n)]
        assert tape.nodes[-1] is root

    def test_linearity(self, rng):
        x0 = rng.normal(size=(3, 4))
        alpha, beta = 0.7, -1.3

        def grads(fn):
            x = t(x0)
            backward(fn(x))
            return x.grad

        f = lambda x: ag.sum_all(ag.tanh(ag.mul(x, x)))
        g = lambda x: ag.mean_all(ag.sigmoid(x))
        both = grads(lambda x: ag.add(ag.scale(f(x), alpha), ag.scale(g(x), beta)))
        np.testing.assert_allclose(both, alpha * grads(f) + beta * grads(g), rtol=1e-12, atol=1e-15)

    def test_determinism(self, rng):
        x0 = rng.normal(size=(4, 3))

        def run():
            x = t(x0)
            y = ag.l2_normalize(ag.tanh(x))
            root = ag.sum_all(ag.mul(y, y))
            backward(root)
            return root.data.tobytes(), x.grad.tobytes()

        assert run() == run()


class TestGradCheck:
    def test_linear_function(self, rng):
        x = t(rng.normal(size=(3, 3)))
        report = grad_check(lambda: ag.sum_all(x), [x])
        assert report.passed and report.max_rel_err < 1e-9

    def test_corrupted_backward_fails(self):
        x = t([0.3, -0.8, 1.1])

        def bad_square(v):
            return make_node(v.data**2, (v,), "bad_square", lambda g: (g * v.data,))  # missing factor 2

        report = grad_check(lambda: ag.sum_all(bad_square(x)), [x])
        assert not report.passed
        assert report.max_rel_err > 0.1

    def test_non_finite_reported(self):
        x = t([1.0])
        report = grad_check(lambda: ag.sum_all(ag.scale(x, float("inf"))), [x])
        assert not report.passed and report.message

    def test_every_primitive_on_100_random_inputs(self):
        worst = {}
        for seed in range(100):
            for name, (f, ps) in primitive_cases(seed).items():
                r = grad_check(f, ps, tol=1e-4)
                worst[name] = max(worst.get(name, 0.0), r.max_rel_err)
        assert max(worst.values()) < 1e-4, worst
