"""
Differentiable layers: forward examples, invariances and gradient checks
"""

import numpy as np
import pytest
from scipy.special import expit

from services import layers as nn
from services.autodiff import Tape, Tensor, gradient_check
from services.errors import LabelError, ShapeError

TOL = 1e-4


def param(rng, *shape):
    return Tensor(rng.normal(size=shape), requires_grad=True)


def projected(out, weights):
    """Scalar probe loss with fixed random weights"""
    return nn.weighted_sum(out, weights)


class TestForwardExamples:

    def test_linear_identity(self):
        eye = Tensor(np.eye(2))
        out = nn.linear(eye, Tensor(np.eye(2)), Tensor(np.zeros(2)))
        np.testing.assert_array_equal(out.data, np.eye(2))

    def test_linear_arithmetic(self):
        out = nn.linear(Tensor([[1.0, 2.0]]), Tensor([[1.0], [1.0]]), Tensor([3.0]))
        np.testing.assert_array_equal(out.data, [[6.0]])

    def test_linear_bias_gradient(self):
        rng = np.random.default_rng(42)
        b = param(rng, 3)
        with Tape() as tape:
            loss = nn.tensor_sum(nn.linear(Tensor(rng.normal(size=(4, 2))), param(rng, 2, 3), b))
        tape.backward(loss)
        np.testing.assert_allclose(b.grad, np.full(3, 4.0))

    def test_linear_shape_mismatch(self):
        with pytest.raises(ShapeError):
            nn.linear(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))

    def test_leaky_relu(self):
        out = nn.leaky_relu(Tensor([-1.0, 0.0, 2.0]), 0.01)
        np.testing.assert_allclose(out.data, [-0.01, 0.0, 2.0])

    def test_leaky_relu_negative_slope_gradient(self):
        x = Tensor([-2.0, -0.5], requires_grad=True)
        with Tape() as tape:
            loss = nn.tensor_sum(nn.leaky_relu(x, 0.01))
        tape.backward(loss)
        np.testing.assert_allclose(x.grad, [0.01, 0.01])

    def test_leaky_relu_idempotent_on_nonnegative(self):
        x = Tensor([0.0, 1.5, 3.0])
        once = nn.leaky_relu(x)
        np.testing.assert_array_equal(nn.leaky_relu(once).data, once.data)

    def test_softplus_at_zero(self):
        np.testing.assert_allclose(nn.softplus(Tensor([0.0])).data, [np.log(2.0)])


class TestDropout:

    def test_identity_cases(self):
        rng = np.random.default_rng(42)
        x = Tensor(rng.normal(size=(5, 4)))
        assert nn.dropout(x, 0.0, nn.TRAIN, rng) is x
        assert nn.dropout(x, 0.5, nn.EVAL) is x

    def test_expectation(self):
        """Mean over many masks stays within 3 sigma of the input"""
        rng = np.random.default_rng(42)
        x = Tensor(np.full((200, 50), 2.0))
        p = 0.3
        out = nn.dropout(x, p, nn.TRAIN, rng).data
        sigma = 2.0 * np.sqrt(p / (1 - p)) / np.sqrt(out.size)
        assert abs(out.mean() - 2.0) < 3 * sigma

    def test_needs_generator_in_train(self):
        with pytest.raises(ValueError):
            nn.dropout(Tensor([1.0]), 0.5, nn.TRAIN)


class TestNormalization:

    def test_layer_norm_constant_row(self):
        out = nn.normalize_rows(Tensor(np.full((2, 5), 3.0)))
        np.testing.assert_array_equal(out.data, np.zeros((2, 5)))

    def test_layer_norm_shift_scale_invariance(self):
        rng = np.random.default_rng(42)
        x = rng.normal(size=(4, 6))
        gamma, beta = Tensor(rng.normal(size=6)), Tensor(rng.normal(size=6))
        a = rng.uniform(0.5, 3.0, size=(4, 1))
        c = rng.normal(size=(4, 1))
        base = nn.layer_norm(Tensor(x), gamma, beta, eps=0.0).data
        moved = nn.layer_norm(Tensor(a * x + c), gamma, beta, eps=0.0).data
        np.testing.assert_allclose(moved, base, atol=1e-10)

    def test_batch_norm_standard_input(self):
        rng = np.random.default_rng(42)
        x = rng.normal(size=(64, 3))
        x = (x - x.mean(axis=0)) / x.std(axis=0)
        stats = nn.BatchStats(np.zeros(3), np.ones(3))
        out = nn.batch_norm(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)), stats, nn.TRAIN)
        np.testing.assert_allclose(out.data, x, atol=1e-4)

    def test_batch_norm_zero_gamma(self):
        rng = np.random.default_rng(42)
        beta = rng.normal(size=3)
        stats = nn.BatchStats(np.zeros(3), np.ones(3))
        out = nn.batch_norm(Tensor(rng.normal(size=(8, 3))), Tensor(np.zeros(3)), Tensor(beta), stats, nn.TRAIN)
        np.testing.assert_allclose(out.data, np.broadcast_to(beta, (8, 3)))

    def test_batch_norm_train_eval_consistency(self):
        """With momentum 1 the running stats equal the batch stats"""
        rng = np.random.default_rng(42)
        x = Tensor(rng.normal(loc=2.0, scale=3.0, size=(32, 4)))
        stats = nn.BatchStats(np.zeros(4), np.ones(4), momentum=1.0)
        train_out = nn.batch_standardize(x, stats, nn.TRAIN).data
        eval_out = nn.batch_standardize(x, stats, nn.EVAL).data
        np.testing.assert_allclose(eval_out, train_out, atol=1e-12)

    def test_batch_norm_uses_given_rows(self):
        rng = np.random.default_rng(42)
        x = rng.normal(size=(10, 2))
        rows = np.array([0, 3, 5, 7])
        stats = nn.BatchStats(np.zeros(2), np.ones(2), momentum=1.0)
        nn.batch_standardize(Tensor(x), stats, nn.TRAIN, rows=rows)
        np.testing.assert_allclose(stats.running_mean, x[rows].mean(axis=0))
        np.testing.assert_allclose(stats.running_var, x[rows].var(axis=0))

    def test_batch_norm_needs_two_rows(self):
        stats = nn.BatchStats(np.zeros(2), np.ones(2))
        with pytest.raises(ShapeError):
            nn.batch_standardize(Tensor(np.ones((1, 2))), stats, nn.TRAIN)

    def test_conditional_zero_projection_is_layer_norm(self):
        rng = np.random.default_rng(42)
        x = Tensor(rng.normal(size=(5, 4)))
        desc = Tensor(rng.normal(size=(5, 3)))
        zeros = Tensor(np.zeros((3, 4)))
        plain = nn.layer_norm(x, Tensor(np.ones(4)), Tensor(np.zeros(4)))
        conditioned = nn.conditional_layer_norm(x, desc, zeros, zeros)
        np.testing.assert_allclose(conditioned.data, plain.data, atol=1e-14)

    def test_conditional_equal_descriptors_share_affine(self):
        """Two rows with equal descriptors and equal inputs produce equal outputs"""
        rng = np.random.default_rng(42)
        row = rng.normal(size=4)
        x = Tensor(np.vstack([row, row, rng.normal(size=4)]))
        d = rng.normal(size=3)
        desc = Tensor(np.vstack([d, d, rng.normal(size=3)]))
        out = nn.conditional_layer_norm(x, desc, Tensor(rng.normal(size=(3, 4))), Tensor(rng.normal(size=(3, 4))))
        np.testing.assert_allclose(out.data[0], out.data[1], rtol=1e-12)


class TestLoss:

    def test_zero_logits(self):
        loss = nn.bce_with_logits(Tensor(np.zeros((3, 2))), np.array([[0, 1], [1, 1], [0, 0]]))
        np.testing.assert_allclose(loss.item(), np.log(2.0))

    def test_confident_correct(self):
        loss = nn.bce_with_logits(Tensor([[50.0]]), np.array([[1]]))
        assert loss.item() < 1e-20

    def test_gradient_is_sigmoid_minus_target(self):
        rng = np.random.default_rng(42)
        z = param(rng, 4, 3)
        y = rng.integers(0, 2, size=(4, 3))
        with Tape() as tape:
            loss = nn.bce_with_logits(z, y)
        tape.backward(loss)
        np.testing.assert_allclose(z.grad, (expit(z.data) - y) / y.size)

    def test_non_binary_targets(self):
        with pytest.raises(LabelError):
            nn.bce_with_logits(Tensor(np.zeros((1, 2))), np.array([[0.5, 1.0]]))


class TestGradients:
    """Central-difference checks of every differentiable op"""

    @pytest.fixture
    def rng(self):
        return np.random.default_rng(42)

    def test_elementwise(self, rng):
        a, b = param(rng, 3, 4), param(rng, 3, 4)
        w = rng.normal(size=(3, 4))
        ops = [
            lambda: projected(nn.add(a, b), w),
            lambda: projected(nn.mul(a, b), w),
            lambda: projected(nn.leaky_relu(a, 0.1), w),
            lambda: projected(nn.sigmoid(a), w),
            lambda: projected(nn.softplus(a), w),
            lambda: projected(nn.scale(nn.add_constant(a, 2.0), -1.5), w),
        ]
        for op in ops:
            assert gradient_check(op, [a, b]) < TOL

    def test_scale_by(self, rng):
        x, f = param(rng, 3, 2), param(rng, 1)
        w = rng.normal(size=(3, 2))
        assert gradient_check(lambda: projected(nn.scale_by(x, f), w), [x, f]) < TOL

    def test_linear(self, rng):
        x, weight, bias = param(rng, 5, 3), param(rng, 3, 4), param(rng, 4)
        w = rng.normal(size=(5, 4))
        assert gradient_check(lambda: projected(nn.linear(x, weight, bias), w), [x, weight, bias]) < TOL

    def test_take_rows(self, rng):
        x = param(rng, 5, 2)
        index = np.array([4, 0, 4, 2])
        w = rng.normal(size=(4, 2))
        assert gradient_check(lambda: projected(nn.take_rows(x, index), w), [x]) < TOL

    def test_layer_norm(self, rng):
        x, gamma, beta = param(rng, 4, 5), param(rng, 5), param(rng, 5)
        w = rng.normal(size=(4, 5))
        assert gradient_check(lambda: projected(nn.layer_norm(x, gamma, beta), w), [x, gamma, beta]) < TOL

    def test_batch_norm_train(self, rng):
        x, gamma, beta = param(rng, 6, 3), param(rng, 3), param(rng, 3)
        w = rng.normal(size=(6, 3))
        rows = np.array([0, 2, 3, 5])

        def loss():
            stats = nn.BatchStats(np.zeros(3), np.ones(3))
            return projected(nn.batch_norm(x, gamma, beta, stats, nn.TRAIN, rows=rows), w)

        assert gradient_check(loss, [x, gamma, beta]) < TOL

    def test_batch_norm_eval(self, rng):
        x, gamma, beta = param(rng, 6, 3), param(rng, 3), param(rng, 3)
        w = rng.normal(size=(6, 3))
        stats = nn.BatchStats(rng.normal(size=3), rng.uniform(0.5, 2.0, size=3))
        assert gradient_check(lambda: projected(nn.batch_norm(x, gamma, beta, stats, nn.EVAL), w),
                              [x, gamma, beta]) < TOL

    def test_conditional_layer_norm(self, rng):
        x, desc = param(rng, 4, 5), param(rng, 4, 3)
        u_gamma, u_beta = param(rng, 3, 5), param(rng, 3, 5)
        w = rng.normal(size=(4, 5))
        assert gradient_check(lambda: projected(nn.conditional_layer_norm(x, desc, u_gamma, u_beta), w),
                              [x, desc, u_gamma, u_beta]) < TOL

    def test_bce(self, rng):
        z = param(rng, 4, 3)
        y = rng.integers(0, 2, size=(4, 3))
        assert gradient_check(lambda: nn.bce_with_logits(z, y), [z]) < TOL

    def test_dropout_fixed_mask(self, rng):
        x = param(rng, 4, 3)
        w = rng.normal(size=(4, 3))
        assert gradient_check(lambda: projected(nn.dropout(x, 0.4, nn.TRAIN, np.random.default_rng(1)), w),
                              [x]) < TOL


class TestTorchOracle:
    """Gradients agree with torch.autograd on a small normalized block"""

    def test_layer_norm_block(self):
        torch = pytest.importorskip('torch')
        rng = np.random.default_rng(42)
        x_np, w_np, b_np = rng.normal(size=(6, 4)), rng.normal(size=(4, 5)), rng.normal(size=5)
        g_np, beta_np = rng.normal(size=5), rng.normal(size=5)
        y_np = rng.integers(0, 2, size=(6, 5))

        params = [Tensor(v, requires_grad=True) for v in (w_np, b_np, g_np, beta_np)]
        with Tape() as tape:
            h = nn.layer_norm(nn.linear(Tensor(x_np), params[0], params[1]), params[2], params[3])
            loss = nn.bce_with_logits(nn.leaky_relu(h, 0.01), y_np)
        tape.backward(loss)

        tw, tb, tg, tbeta = (torch.tensor(v, dtype=torch.float64, requires_grad=True)
                             for v in (w_np, b_np, g_np, beta_np))
        th = torch.nn.functional.layer_norm(torch.tensor(x_np) @ tw + tb, (5,), tg, tbeta, eps=1e-5)
        tloss = torch.nn.functional.binary_cross_entropy_with_logits(
            torch.nn.functional.leaky_relu(th, 0.01), torch.tensor(y_np, dtype=torch.float64))
        tloss.backward()

        np.testing.assert_allclose(loss.item(), tloss.item(), rtol=1e-12)
        for ours, theirs in zip(params, (tw, tb, tg, tbeta)):
            np.testing.assert_allclose(ours.grad, theirs.grad.numpy(), rtol=1e-9, atol=1e-12)

    def test_batch_norm_block(self):
        torch = pytest.importorskip('torch')
        rng = np.random.default_rng(42)
        x_np, g_np, beta_np = rng.normal(size=(8, 3)), rng.normal(size=3), rng.normal(size=3)
        w_np = rng.normal(size=(8, 3))

        x = Tensor(x_np, requires_grad=True)
        gamma, beta = Tensor(g_np, requires_grad=True), Tensor(beta_np, requires_grad=True)
        with Tape() as tape:
            stats = nn.BatchStats(np.zeros(3), np.ones(3))
            loss = nn.weighted_sum(nn.batch_norm(x, gamma, beta, stats, nn.TRAIN), w_np)
        tape.backward(loss)

        tx = torch.tensor(x_np, requires_grad=True)
        tg = torch.tensor(g_np, requires_grad=True)
        tbeta = torch.tensor(beta_np, requires_grad=True)
        out = torch.nn.functional.batch_norm(tx, torch.zeros(3, dtype=torch.float64),
                                             torch.ones(3, dtype=torch.float64), tg, tbeta,
                                             training=True, momentum=0.1, eps=1e-5)
        (out * torch.tensor(w_np)).sum().backward()

        for ours, theirs in ((x, tx), (gamma, tg), (beta, tbeta)):
            np.testing.assert_allclose(ours.grad, theirs.grad.numpy(), rtol=1e-9, atol=1e-12)
