"""Gradient correctness of every primitive against finite differences,
plus the tape usage contracts."""

import numpy as np
import pytest

from srquant import ops
from srquant.autodiff import Parameter, Tape, Tensor, backward
from srquant.errors import UsageError

from helpers import central_diff, max_rel_err, naive_conv2d

FD_TOL = 1e-3


def autodiff_grad(build_loss, x_value):
    """Gradient of build_loss(tensor) w.r.t. a float32 leaf."""
    x = Tensor(np.asarray(x_value, dtype=np.float32))
    with Tape() as tape:
        loss = build_loss(x)
    backward(tape, loss)
    return x.grad


def check_against_fd(build_loss, oracle, x_value, tol=FD_TOL):
    got = autodiff_grad(build_loss, x_value)
    want = central_diff(oracle, x_value)
    assert max_rel_err(got, want, floor=1e-4) < tol


def random_input(seed, shape=(2, 4, 8, 8), away_from=0.0, margin=0.1):
    rng = np.random.default_rng(seed)
    x = rng.uniform(-1.0, 1.0, shape)
    # Keep probe points away from relu kinks so finite differences are clean.
    x = np.where(np.abs(x - away_from) < margin, x + 2 * margin, x)
    return x.astype(np.float32)


class TestPrimitiveGradients:
    @pytest.mark.parametrize("seed", range(20))
    def test_mean_gradient_is_uniform(self, seed):
        x = random_input(seed, (1, 2, 3, 4))
        g = autodiff_grad(lambda t: ops.mean(t), x)
        np.testing.assert_allclose(g, np.full_like(x, 1.0 / x.size), atol=1e-7)

    @pytest.mark.parametrize("seed", range(20))
    def test_std_matches_fd(self, seed):
        x = random_input(seed, (1, 1, 2, 4))
        check_against_fd(
            lambda t: ops.std(t),
            lambda a: float(np.sqrt(np.mean((a - a.mean()) ** 2))),
            x,
        )

    @pytest.mark.parametrize("seed", range(20))
    def test_relu_mean_matches_fd(self, seed):
        x = random_input(seed, (2, 3, 4, 4), away_from=0.0, margin=0.05)
        check_against_fd(
            lambda t: ops.mean(ops.relu(t)),
            lambda a: float(np.maximum(a, 0.0).mean()),
            x,
        )

    @pytest.mark.parametrize("seed", range(20))
    def test_conv_weight_gradient_matches_fd(self, seed):
        rng = np.random.default_rng(1000 + seed)
        x = rng.standard_normal((1, 2, 4, 4)).astype(np.float32)
        w0 = rng.standard_normal((2, 2, 3, 3)).astype(np.float32)
        b = rng.standard_normal(2).astype(np.float32)
        target = rng.standard_normal((1, 2, 4, 4)).astype(np.float32)

        xt, bt, tt = Tensor(x), Tensor(b), Tensor(target)

        def loss(wt):
            return ops.mean(ops.absolute(ops.sub(ops.conv2d(xt, wt, bt, padding=1), tt)))

        got = autodiff_grad(loss, w0)
        want = central_diff(
            lambda wa: float(np.abs(naive_conv2d(x, wa, b, padding=1) - target).mean()), w0
        )
        assert max_rel_err(got, want, floor=1e-4) < FD_TOL

    @pytest.mark.parametrize("seed", range(20))
    def test_conv_input_gradient_matches_fd(self, seed):
        rng = np.random.default_rng(2000 + seed)
        x0 = rng.standard_normal((1, 2, 4, 4)).astype(np.float32)
        w = rng.standard_normal((3, 2, 3, 3)).astype(np.float32)
        b = rng.standard_normal(3).astype(np.float32)
        wt, bt = Tensor(w), Tensor(b)

        got = autodiff_grad(lambda t: ops.mean(ops.conv2d(t, wt, bt, stride=1, padding=1)), x0)
        want = central_diff(lambda a: float(naive_conv2d(a, w, b, padding=1).mean()), x0)
        assert max_rel_err(got, want, floor=1e-4) < FD_TOL

    @pytest.mark.parametrize("seed", range(20))
    def test_broadcast_ops_match_fd(self, seed):
        x = random_input(seed, (2, 3, 3, 3))
        v = np.linspace(0.5, 1.5, 3).astype(np.float32)
        vt = Tensor(v)
        check_against_fd(
            lambda t: ops.mean(ops.broadcast_mul_channel(ops.broadcast_add_channel(t, vt), vt)),
            lambda a: float(((a + v.reshape(1, 3, 1, 1)) * v.reshape(1, 3, 1, 1)).mean()),
            x,
        )

    @pytest.mark.parametrize("seed", range(20))
    def test_broadcast_vector_gradient_matches_fd(self, seed):
        x = random_input(seed, (2, 3, 3, 3))
        xt = Tensor(x)
        v0 = np.linspace(0.5, 1.5, 3).astype(np.float32)

        def loss(vt):
            return ops.std(ops.broadcast_mul_channel(xt, vt))

        got = autodiff_grad(loss, v0)
        want = central_diff(
            lambda va: float(np.sqrt(np.mean(((x * va.reshape(1, 3, 1, 1))
                                              - (x * va.reshape(1, 3, 1, 1)).mean()) ** 2))),
            v0,
        )
        assert max_rel_err(got, want, floor=1e-4) < FD_TOL

    @pytest.mark.parametrize("seed", range(20))
    def test_channel_stats_match_fd(self, seed):
        x = random_input(seed, (2, 3, 3, 3))
        weights = np.linspace(1.0, 2.0, 3)

        def oracle(a):
            mu = a.mean(axis=(0, 2, 3))
            sd = a.std(axis=(0, 2, 3))
            return float((weights * mu).sum() + (weights * sd).sum())

        def loss(t):
            wv = Tensor(weights.astype(np.float32))
            part1 = ops.mean(ops.mul(ops.channel_mean(t), wv))
            part2 = ops.mean(ops.mul(ops.channel_std(t), wv))
            return ops.mul_scalar(ops.add(part1, part2), 3.0)

        check_against_fd(loss, oracle, x)

    @pytest.mark.parametrize("seed", range(20))
    def test_pixel_shuffle_gradient_matches_fd(self, seed):
        x = random_input(seed, (1, 8, 2, 2))
        weights = np.arange(32, dtype=np.float64).reshape(1, 2, 4, 4)

        def oracle(a):
            y = a.reshape(1, 2, 2, 2, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(1, 2, 4, 4)
            return float((weights * y).sum() / y.size)

        def loss(t):
            wt = Tensor(weights.astype(np.float32))
            return ops.mean(ops.mul(ops.pixel_shuffle(t, 2), wt))

        check_against_fd(loss, oracle, x)

    @pytest.mark.parametrize("seed", range(20))
    def test_normalize_l2_sample_matches_fd(self, seed):
        x = random_input(seed, (2, 2, 3, 3))
        target = np.random.default_rng(seed).standard_normal((2, 2, 3, 3))

        def oracle(a):
            flat = a.reshape(2, -1)
            norms = np.sqrt((flat**2).sum(axis=1)).reshape(-1, 1, 1, 1)
            y = a / norms
            return float(((y - target) ** 2).mean())

        def loss(t):
            tt = Tensor(target.astype(np.float32))
            d = ops.sub(ops.normalize_l2_sample(t), tt)
            return ops.mean(ops.mul(d, d))

        check_against_fd(loss, oracle, x)

    @pytest.mark.parametrize("seed", range(10))
    def test_reciprocal_matches_fd(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.uniform(0.5, 2.0, (1, 2, 2, 2)).astype(np.float32)
        check_against_fd(
            lambda t: ops.mean(ops.reciprocal(ops.add_scalar(t, 0.5))),
            lambda a: float((1.0 / (a + 0.5)).mean()),
            x,
        )


class TestGradientEdgeCases:
    def test_std_zero_variance_yields_zero_gradient(self):
        x = Tensor(np.full((1, 1, 2, 2), 3.0, dtype=np.float32))
        with Tape() as tape:
            loss = ops.std(x)
        backward(tape, loss)
        np.testing.assert_array_equal(x.grad, np.zeros_like(x.data))

    def test_channel_std_zero_variance_channel(self):
        data = np.zeros((1, 2, 2, 2), dtype=np.float32)
        data[:, 1] = np.arange(4, dtype=np.float32).reshape(1, 2, 2)
        x = Tensor(data)
        with Tape() as tape:
            loss = ops.mean(ops.channel_std(x))
        backward(tape, loss)
        assert np.all(np.isfinite(x.grad))
        np.testing.assert_array_equal(x.grad[:, 0], 0.0)

    def test_relu_subgradient_at_zero_is_zero(self):
        x = Tensor(np.zeros((1, 1, 1, 2), dtype=np.float32))
        with Tape() as tape:
            loss = ops.mean(ops.relu(x))
        backward(tape, loss)
        np.testing.assert_array_equal(x.grad, 0.0)

    def test_mean_gradient_uniform(self):
        x = Tensor(np.arange(6, dtype=np.float32).reshape(1, 1, 2, 3))
        with Tape() as tape:
            loss = ops.mean(x)
        backward(tape, loss)
        np.testing.assert_allclose(x.grad, 1.0 / 6.0, atol=1e-7)


class TestTapeContracts:
    def test_consumed_tape_raises(self):
        x = Tensor(np.ones((1, 1, 2, 2), dtype=np.float32))
        with Tape() as tape:
            loss = ops.mean(x)
        backward(tape, loss)
        with pytest.raises(UsageError):
            backward(tape, loss)

    def test_retain_allows_second_pass(self):
        p = Parameter(np.ones((1, 1, 2, 2), dtype=np.float32), name="p")
        with Tape() as tape:
            loss1 = ops.mean(p)
            loss2 = ops.mul_scalar(ops.mean(p), 2.0)
        backward(tape, loss1, slot="r", retain=True)
        backward(tape, loss2, slot="v")
        np.testing.assert_allclose(p.grad_r, 0.25, atol=1e-7)
        np.testing.assert_allclose(p.grad_v, 0.5, atol=1e-7)
        with pytest.raises(UsageError):
            backward(tape, loss1)

    def test_loss_must_be_scalar(self):
        x = Tensor(np.ones((1, 1, 2, 2), dtype=np.float32))
        with Tape() as tape:
            y = ops.relu(x)
        with pytest.raises(UsageError):
            backward(tape, y)

    def test_foreign_loss_rejected(self):
        x = Tensor(np.ones((1, 1, 2, 2), dtype=np.float32))
        with Tape() as tape:
            ops.mean(x)
        stray = ops.mean(x)  # recorded on no tape
        with pytest.raises(UsageError):
            backward(tape, stray)

    def test_linearity_of_backward(self):
        rng = np.random.default_rng(11)
        data = rng.standard_normal((1, 2, 3, 3)).astype(np.float32)
        a, b = 2.0, -3.0

        def grad_of(scale1, scale2):
            x = Tensor(data.copy())
            with Tape() as tape:
                l1 = ops.mean(ops.relu(x))
                l2 = ops.std(x)
                loss = ops.add(ops.mul_scalar(l1, scale1), ops.mul_scalar(l2, scale2))
            backward(tape, loss)
            return x.grad

        combined = grad_of(a, b)
        g1 = grad_of(1.0, 0.0)
        g2 = grad_of(0.0, 1.0)
        np.testing.assert_allclose(combined, a * g1 + b * g2, atol=1e-6)

    def test_forward_and_gradients_deterministic(self):
        def run():
            rng = np.random.default_rng(42)
            x = Tensor(rng.standard_normal((2, 4, 4, 4)).astype(np.float32))
            w = Tensor(rng.standard_normal((4, 4, 3, 3)).astype(np.float32))
            b = Tensor(rng.standard_normal(4).astype(np.float32))
            with Tape() as tape:
                y = ops.relu(ops.conv2d(x, w, b, padding=1))
                loss = ops.add(ops.mean(y), ops.std(y))
            backward(tape, loss)
            return loss.item(), x.grad.copy(), w.grad.copy()

        loss1, gx1, gw1 = run()
        loss2, gx2, gw2 = run()
        assert loss1 == loss2
        np.testing.assert_array_equal(gx1, gx2)
        np.testing.assert_array_equal(gw1, gw2)

    def test_parameter_slots_accumulate_separately(self):
        p = Parameter(np.array([1.0, 2.0], dtype=np.float32), name="p")
        with Tape() as tape:
            x4 = Tensor(np.zeros((1, 2, 1, 1), dtype=np.float32))
            y = ops.broadcast_add_channel(x4, p)
            loss = ops.mean(y)
        backward(tape, loss, slot="r", retain=True)
        assert p.grads_populated
        np.testing.assert_allclose(p.grad_r, 0.5)
        np.testing.assert_array_equal(p.grad_v, 0.0)
        backward(tape, loss, slot="v")
        np.testing.assert_allclose(p.grad_v, 0.5)
        p.zero_grad()
        assert not p.grads_populated
        np.testing.assert_array_equal(p.grad_r, 0.0)
