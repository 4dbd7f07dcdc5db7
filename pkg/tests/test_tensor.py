"""Engine tests: op semantics, recorded gradients, graph discipline."""

import numpy as np
import pytest

import fedcg.tensor as T
from fedcg.gradcheck import finite_difference_check
from fedcg.tensor import DomainError, GraphError, ShapeError, Tensor


@pytest.fixture(autouse=True)
def float64_mode():
    T.set_default_dtype(np.float64)
    yield


def rng(seed=0):
    return np.random.default_rng(seed)


class TestConv2d:
    def test_identity_kernel(self):
        x = Tensor(rng().random((2, 1, 6, 6)))
        k = Tensor(np.ones((1, 1, 1, 1)))
        b = Tensor(np.zeros(1))
        out = T.conv2d(x, k, b)
        assert np.array_equal(out.data, x.data)

    def test_zero_kernel(self):
        x = Tensor(rng().random((2, 3, 8, 8)))
        k = Tensor(np.zeros((4, 3, 3, 3)))
        b = Tensor(np.zeros(4))
        out = T.conv2d(x, k, b)
        assert np.all(out.data == 0.0)

    def test_gradient_matches_finite_differences(self):
        g = rng(1)
        x = Tensor(g.standard_normal((1, 2, 5, 5)), requires_grad=True)
        k = Tensor(g.standard_normal((3, 2, 3, 3)) * 0.4, requires_grad=True)
        b = Tensor(g.standard_normal(3) * 0.1, requires_grad=True)
        rep = finite_difference_check(lambda: T.tsum(T.tanh(T.conv2d(x, k, b))),
                                      [("x", x), ("k", k), ("b", b)], h=1e-5)
        assert rep.passed, rep.per_param

    def test_channel_mismatch_raises(self):
        with pytest.raises(ShapeError):
            T.conv2d(Tensor(np.zeros((1, 2, 5, 5))), Tensor(np.zeros((3, 4, 3, 3))))

    def test_non_integral_output_raises(self):
        with pytest.raises(ShapeError):
            T.conv2d(Tensor(np.zeros((1, 1, 5, 5))), Tensor(np.zeros((1, 1, 2, 2))), stride=2)


class TestConvTranspose2d:
    def test_identity_kernel_stride1(self):
        x = Tensor(rng().random((2, 1, 5, 5)))
        k = Tensor(np.ones((1, 1, 1, 1)))
        out = T.conv_transpose2d(x, k)
        assert np.array_equal(out.data, x.data)

    def test_output_shape_formula(self):
        # (H-1)*s - 2p + k: 4x4 input, k=4, s=2, p=1 -> 8x8
        x = Tensor(rng().random((1, 2, 4, 4)))
        k = Tensor(rng().random((2, 3, 4, 4)))
        out = T.conv_transpose2d(x, k, stride=2, padding=1)
        assert out.shape == (1, 3, 8, 8)

    def test_matches_scatter_add_oracle(self):
        g = rng(3)
        x = g.standard_normal((1, 2, 4, 4))
        k = g.standard_normal((2, 3, 4, 4))
        stride, pad = 2, 1
        out = T.conv_transpose2d(Tensor(x), Tensor(k), stride=stride, padding=pad).data
        # brute-force scatter-add over input positions
        hp = (4 - 1) * stride + 4
        ref = np.zeros((1, 3, hp, hp))
        for n in range(1):
            for c in range(2):
                for i in range(4):
                    for j in range(4):
                        for o in range(3):
                            ref[n, o, i * stride:i * stride + 4, j * stride:j * stride + 4] += \
                                x[n, c, i, j] * k[c, o]
        ref = ref[:, :, pad:-pad, pad:-pad]
        np.testing.assert_allclose(out, ref, rtol=1e-12)

    def test_gradient_matches_finite_differences(self):
        g = rng(4)
        x = Tensor(g.standard_normal((1, 2, 3, 3)), requires_grad=True)
        k = Tensor(g.standard_normal((2, 2, 3, 3)) * 0.4, requires_grad=True)
        rep = finite_difference_check(
            lambda: T.tsum(T.sigmoid(T.conv_transpose2d(x, k, stride=2, padding=1))),
            [("x", x), ("k", k)], h=1e-5)
        assert rep.passed, rep.per_param


class TestAffine:
    def test_identity_weight(self):
        x = Tensor(rng().random((3, 4)))
        out = T.affine(x, Tensor(np.eye(4)), Tensor(np.zeros(4)))
        assert np.array_equal(out.data, x.data)

    def test_zero_weight_bias_rows(self):
        b = rng(5).standard_normal(4)
        out = T.affine(Tensor(np.ones((3, 6))), Tensor(np.zeros((4, 6))), Tensor(b))
        for row in out.data:
            np.testing.assert_array_equal(row, b)

    def test_gradient(self):
        g = rng(6)
        x = Tensor(g.standard_normal((3, 5)), requires_grad=True)
        w = Tensor(g.standard_normal((4, 5)) * 0.3, requires_grad=True)
        b = Tensor(g.standard_normal(4) * 0.1, requires_grad=True)
        rep = finite_difference_check(lambda: T.tsum(T.tanh(T.affine(x, w, b))),
                                      [("x", x), ("w", w), ("b", b)])
        assert rep.passed

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            T.affine(Tensor(np.zeros((2, 5))), Tensor(np.zeros((3, 4))))


class TestActivations:
    def test_relu_values(self):
        out = T.activation(Tensor([-1.0, 0.0, 2.0]), "relu")
        np.testing.assert_array_equal(out.data, [0.0, 0.0, 2.0])

    def test_sigmoid_at_zero(self):
        assert T.activation(Tensor([0.0]), "sigmoid").item() == 0.5

    def test_tanh_gradient_at_zero(self):
        x = Tensor([0.0], requires_grad=True)
        T.tsum(T.tanh(x)).backward()
        assert x.grad.item() == pytest.approx(1.0, abs=1e-12)
        rep = finite_difference_check(lambda: T.tsum(T.tanh(x)), [("x", x)])
        assert rep.passed

    def test_leaky_relu_slope(self):
        out = T.activation(Tensor([-2.0, 3.0]), "leaky_relu", slope=0.2)
        np.testing.assert_allclose(out.data, [-0.4, 3.0])

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            T.activation(Tensor([0.0]), "swish")


class TestSoftmax:
    def test_uniform_rows(self):
        out = T.softmax(Tensor([[0.0, 0.0, 0.0]]))
        np.testing.assert_allclose(out.data, [[1 / 3] * 3], atol=1e-15)

    def test_large_logits_no_overflow(self):
        out = T.softmax(Tensor([[1000.0, 0.0]]))
        assert np.all(np.isfinite(out.data))
        np.testing.assert_allclose(out.data, [[1.0, 0.0]], atol=1e-300)

    def test_against_high_precision_oracle(self):
        # mpmath 50-digit evaluation of softmax(1,2,3), frozen
        expected = [0.090030573170380458, 0.24472847105479765, 0.66524095577482189]
        out = T.softmax(Tensor([[1.0, 2.0, 3.0]]))
        np.testing.assert_allclose(out.data[0], expected, atol=1e-12)

    def test_rows_sum_to_one(self):
        out = T.softmax(Tensor(rng(7).standard_normal((50, 9)) * 10))
        np.testing.assert_allclose(out.data.sum(axis=1), 1.0, atol=1e-12)
        assert out.data.min() >= 0.0 and out.data.max() <= 1.0


class TestCrossEntropy:
    def test_uniform_logits(self):
        loss = T.cross_entropy(Tensor(np.zeros((1, 4))), [2])
        assert loss.item() == pytest.approx(np.log(4.0), abs=1e-12)

    def test_monotone_decrease_with_margin(self):
        values = []
        for m in (1.0, 10.0, 100.0):
            logits = np.zeros((1, 3))
            logits[0, 1] = m
            values.append(T.cross_entropy(Tensor(logits), [1]).item())
        assert values[0] > values[1] > values[2]

    def test_gradient_is_softmax_minus_onehot(self):
        g = rng(8)
        logits = Tensor(g.standard_normal((4, 5)), requires_grad=True)
        labels = np.array([0, 2, 4, 1])
        loss = T.cross_entropy(logits, labels)
        loss.backward()
        probs = T.softmax(Tensor(logits.data)).data
        onehot = np.zeros((4, 5))
        onehot[np.arange(4), labels] = 1.0
        np.testing.assert_allclose(logits.grad.data, (probs - onehot) / 4, atol=1e-12)

    def test_gradient_vs_finite_differences(self):
        g = rng(9)
        logits = Tensor(g.standard_normal((3, 4)), requires_grad=True)
        rep = finite_difference_check(lambda: T.cross_entropy(logits, [1, 0, 3]),
                                      [("logits", logits)])
        assert rep.passed

    def test_out_of_range_label(self):
        with pytest.raises(DomainError):
            T.cross_entropy(Tensor(np.zeros((1, 3))), [3])


class TestMse:
    def test_identical_inputs(self):
        x = Tensor(rng().random((3, 3)))
        assert T.mse(x, x).item() == 0.0

    def test_zero_vs_one(self):
        assert T.mse(Tensor(np.zeros((2, 5))), Tensor(np.ones((2, 5)))).item() == 1.0

    def test_gradient(self):
        g = rng(10)
        a = Tensor(g.standard_normal((2, 3)), requires_grad=True)
        b = Tensor(g.standard_normal((2, 3)), requires_grad=True)
        loss = T.mse(a, b)
        loss.backward()
        np.testing.assert_allclose(a.grad.data, 2 * (a.data - b.data) / 6, atol=1e-12)
        rep = finite_difference_check(lambda: T.mse(a, b), [("a", a), ("b", b)])
        assert rep.passed

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            T.mse(Tensor(np.zeros((2, 2))), Tensor(np.zeros((2, 3))))


class TestGanLosses:
    def test_half_outputs(self):
        d = Tensor(np.full((4, 1), 0.5))
        disc, gen = T.gan_losses(d, d, "saturating")
        assert gen.item() == pytest.approx(np.log(0.5), abs=1e-12)
        assert disc.item() == pytest.approx(2 * np.log(0.5), abs=1e-12)

    def test_perfect_discriminator_clamped_finite(self):
        d_real = Tensor(np.ones((4, 1)))
        d_fake = Tensor(np.zeros((4, 1)))
        disc, _ = T.gan_losses(d_real, d_fake, "saturating")
        assert np.isfinite(disc.item())
        assert disc.item() == pytest.approx(2 * np.log(T.LOG_EPS), rel=1e-9)

    def test_gradients_both_modes(self):
        g = rng(11)
        for mode in ("saturating", "non_saturating"):
            raw_r = Tensor(g.standard_normal((5, 1)), requires_grad=True)
            raw_f = Tensor(g.standard_normal((5, 1)), requires_grad=True)
            for which in (0, 1):
                def f():
                    return T.gan_losses(T.sigmoid(raw_r), T.sigmoid(raw_f), mode)[which]
                rep = finite_difference_check(f, [("raw_r", raw_r), ("raw_f", raw_f)])
                assert rep.passed, (mode, which, rep.per_param)

    def test_domain_error(self):
        with pytest.raises(DomainError):
            T.gan_losses(Tensor([[1.5]]), Tensor([[0.5]]))


class TestKlDivergence:
    def test_identical_distributions(self):
        p = T.softmax(Tensor(rng(12).standard_normal((4, 6))))
        assert T.kl_divergence(p, p).item() == 0.0

    def test_known_value(self):
        p = Tensor([[1.0, 0.0]])
        q = Tensor([[0.5, 0.5]])
        assert T.kl_divergence(p, q).item() == pytest.approx(np.log(2.0), abs=1e-9)

    def test_nonnegative_property(self):
        g = rng(13)
        for _ in range(1000):
            p = T.softmax(Tensor(g.standard_normal((2, 5)) * 3))
            q = T.softmax(Tensor(g.standard_normal((2, 5)) * 3))
            assert T.kl_divergence(p, q).item() >= 0.0

    def test_non_normalized_rejected(self):
        with pytest.raises(DomainError):
            T.kl_divergence(Tensor([[0.5, 0.2]]), Tensor([[0.5, 0.5]]))

    def test_gradients_flow_to_both(self):
        g = rng(14)
        a = Tensor(g.standard_normal((3, 4)), requires_grad=True)
        b = Tensor(g.standard_normal((3, 4)), requires_grad=True)
        rep = finite_difference_check(
            lambda: T.kl_divergence(T.softmax(a), T.softmax(b)), [("a", a), ("b", b)])
        assert rep.passed


class TestGraphDiscipline:
    def test_double_backward_without_rerecord_raises(self):
        x = Tensor([2.0], requires_grad=True)
        loss = T.tsum(T.mul(x, x))
        loss.backward()
        with pytest.raises(GraphError):
            loss.backward()

    def test_backward_requires_scalar(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(GraphError):
            T.mul(x, x).backward()

    def test_constant_root_raises(self):
        with pytest.raises(GraphError):
            Tensor([1.0]).backward()

    def test_node_ids_assigned_to_ops_only(self):
        x = Tensor([1.0], requires_grad=True)
        const = Tensor([2.0])
        out = T.mul(x, const)
        assert x.node_id is None and const.node_id is None
        assert out.node_id is not None

    def test_no_grad_suppresses_recording(self):
        x = Tensor([1.0], requires_grad=True)
        with T.no_grad():
            out = T.mul(x, x)
        assert out.node_id is None and not out.requires_grad

    def test_grad_api_leaves_dot_grad_untouched(self):
        x = Tensor([3.0], requires_grad=True)
        loss = T.tsum(T.mul(x, x))
        (g,) = T.grad(loss, [x])
        assert x.grad is None
        assert g.item() == pytest.approx(6.0)

    def test_forward_determinism_bitwise(self):
        g = rng(15)
        x = g.standard_normal((2, 3, 8, 8))
        k = g.standard_normal((4, 3, 3, 3))
        a = T.conv2d(Tensor(x), Tensor(k), padding=1).data
        b = T.conv2d(Tensor(x), Tensor(k), padding=1).data
        assert np.array_equal(a, b)


class TestDoubleBackward:
    def test_gradient_of_gradient_norm(self):
        g = rng(16)
        w = Tensor(g.standard_normal((4, 6)) * 0.4, requires_grad=True)
        x = Tensor(g.standard_normal((2, 6)), requires_grad=True)

        def attack_objective():
            loss = T.cross_entropy(T.affine(x, w), [1, 3])
            (gw,) = T.grad(loss, [w], create_graph=True)
            return T.tsum(T.mul(gw, gw))

        rep = finite_difference_check(attack_objective, [("x", x)])
        assert rep.passed

    def test_through_conv_chain(self):
        g = rng(17)
        k = Tensor(g.standard_normal((2, 1, 3, 3)) * 0.5, requires_grad=True)
        w = Tensor(g.standard_normal((3, 8)) * 0.4, requires_grad=True)
        x = Tensor(g.random((1, 1, 6, 6)), requires_grad=True)

        def attack_objective():
            feats = T.avg_pool2d(T.relu(T.conv2d(x, k)), 2)
            loss = T.cross_entropy(T.affine(T.reshape(feats, (1, -1)), w), [1])
            grads = T.grad(loss, [k, w], create_graph=True)
            total = None
            for gt in grads:
                term = T.tsum(T.mul(gt, gt))
                total = term if total is None else T.add(total, term)
            return total

        rep = finite_difference_check(attack_objective, [("x", x)])
        assert rep.passed


class TestFiniteDifferenceOracle:
    def test_linear_function_exact(self):
        x = Tensor([2.0], requires_grad=True)
        rep = finite_difference_check(lambda: T.tsum(T.mul(x, 3.0)), [("x", x)])
        assert rep.max_rel_error < 1e-9

    def test_layer_invariant_over_many_seeds(self):
        worst = 0.0
        for s in range(20):
            g = rng(100 + s)
            x = Tensor(g.standard_normal((1, 2, 5, 5)), requires_grad=True)
            k = Tensor(g.standard_normal((2, 2, 3, 3)) * 0.4, requires_grad=True)
            rep = finite_difference_check(
                lambda: T.tsum(T.tanh(T.conv2d(x, k))), [("x", x), ("k", k)])
            worst = max(worst, rep.max_rel_error)
        assert worst < 1e-4
