import numpy as np
import pytest

from proxprop.linalg import LinearOperator, power_iteration
from proxprop.network import Dense, Network, Tanh, forward, loss_and_grad
from proxprop.penalty import penalty_backprop_step
from proxprop.prox import ProxConfig, proxprop_directions
from proxprop.verify import (descent_report, finite_diff_grad, format_record,
                             gradient_check, gradient_check_abs, gram_conditioning,
                             kink_margin, prop1_harness, random_net, random_relu_net,
                             rel_error, spectral_bounds)


class TestFiniteDifferences:
    def test_constant_loss(self):
        net = Network.mlp([3, 4, 2], seed=0)
        net.params[-1][:] = 0.0
        # identical samples with balanced labels: every parameter is stationary
        X = np.tile(np.random.default_rng(0).standard_normal((3, 1)), (1, 4))
        fd = finite_diff_grad(net, X, np.array([0, 1, 0, 1]))
        for est in fd:
            assert np.abs(est).max() <= 1e-9

    def test_quadratic_toy(self, rng):
        # f(theta) = 1/2 ||theta X - z||^2 checked through a generic central difference
        X = rng.standard_normal((3, 5))
        z = rng.standard_normal((2, 5))
        theta = rng.standard_normal((2, 3))
        f = lambda t: 0.5 * np.sum((t @ X - z) ** 2)
        h = 1e-5
        fd = np.zeros_like(theta)
        for idx in np.ndindex(*theta.shape):
            e = np.zeros_like(theta)
            e[idx] = h
            fd[idx] = (f(theta + e) - f(theta - e)) / (2 * h)
        np.testing.assert_allclose(fd, (theta @ X - z) @ X.T, atol=1e-6)

    def test_tanh_cross_check(self):
        net, X, y, _ = random_net(3)
        assert gradient_check(net, X, y) <= 1e-5

    def test_subsampling(self):
        net = Network.mlp([30, 20, 3], seed=0)
        X = np.random.default_rng(0).standard_normal((30, 2))
        fd = finite_diff_grad(net, X, np.array([0, 1]), max_coords=10)
        assert np.sum(~np.isnan(fd[0])) == 10
        assert np.sum(~np.isnan(fd[1])) == 10

    def test_second_order_convergence(self):
        ratios = []
        for seed in range(5):
            net = Network.mlp([3, 4, 3], activation="tanh", seed=seed)
            rng = np.random.default_rng(seed)
            X = rng.standard_normal((3, 4)) * 2
            y = rng.integers(0, 3, 4)
            ratios.append(gradient_check_abs(net, X, y, 2e-2) / gradient_check_abs(net, X, y, 1e-2))
        assert all(2.0 <= r <= 8.0 for r in ratios), ratios

    def test_invalid_step(self):
        net, X, y, _ = random_net(0)
        with pytest.raises(ValueError):
            finite_diff_grad(net, X, y, h=0.0)


class TestDescentReport:
    def test_aligned(self, rng):
        g = [rng.standard_normal((2, 3))]
        report = descent_report(g, g)
        assert abs(report.layers[0].cos_alpha - 1.0) <= 1e-15 and report.ok

    def test_opposite(self, rng):
        g = [rng.standard_normal((2, 3))]
        report = descent_report([-g[0]], g)
        assert abs(report.layers[0].cos_alpha + 1.0) <= 1e-15
        assert report.violations == [0]
        assert "status=FAIL" in report.to_records()[0]

    def test_zero_gradient_absent(self):
        report = descent_report([np.ones(2)], [np.zeros(2)])
        assert report.layers[0].cos_alpha is None and report.ok
        assert "cos_alpha=absent" in report.to_records()[0]

    def test_exact_mode_bound(self):
        for seed in range(5):
            net, X, y, _ = random_net(seed)
            bounds = spectral_bounds(net, X, 1.0)
            dirs = proxprop_directions(net, X, y, ProxConfig.exact(1.0))
            report = descent_report(dirs, loss_and_grad(net, X, y), bounds)
            assert report.ok
            for layer in report.layers:
                if layer.cos_alpha is not None:
                    assert layer.cos_alpha >= layer.lower_bound - 1e-8

    def test_bound_above_closed_form(self):
        # (1/tau)/(1/tau + lambda_max(grad phi grad phi*)) never exceeds the exact ratio
        net, X, y, _ = random_net(8)
        bounds = spectral_bounds(net, X, 1.0)
        cache, _ = forward(net, X)
        for i, layer in enumerate(net.linear[:-1]):
            A = layer.lower(cache.a[i])
            op = LinearOperator(lambda v: A @ (A.T @ v), (A.shape[0],))
            lam = power_iteration(op, iters=500)
            assert bounds[i] >= 1.0 / (1.0 + lam) - 1e-8

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            descent_report([np.ones(2)], [])


class TestProp1Harness:
    def test_passes(self):
        report = prop1_harness(range(50))
        assert report.passed and report.max_deviation <= 1e-9
        assert report.to_records()[-1].endswith("status=PASS")

    def test_relu(self):
        assert prop1_harness(range(10), activation="relu").passed

    def test_negative_control(self):
        report = prop1_harness(range(5), rho_scale=2.0)
        assert not report.passed and report.max_deviation > 1e-6
        assert report.to_records()[-1].endswith("status=FAIL")

    def test_width_one_chain(self):
        w, b, V, c = 0.7, -0.2, np.array([1.5, -0.5]), np.array([0.1, 0.3])
        params = [np.array([[w, b]]), np.column_stack([V, c])]
        net = Network([Dense(1, 1), Tanh(), Dense(1, 2)], (1,),
                      params=params)
        x, label = 0.9, 1
        h = np.tanh(w * x + b)
        logits = V * h + c
        p = np.exp(logits) / np.exp(logits).sum()
        d = p - np.eye(2)[label]
        dz = (V @ d) * (1 - h * h)
        expected = [np.array([[dz * x, dz]]), np.column_stack([d * h, d])]
        grads = loss_and_grad(net, np.array([[x]]), np.array([label]))
        tau = 0.5
        stepped = penalty_backprop_step(net, np.array([[x]]), np.array([label]), tau)
        for g, e, p0, s in zip(grads, expected, params, stepped):
            np.testing.assert_allclose(g, e, rtol=1e-12, atol=1e-15)
            np.testing.assert_allclose((p0 - s) / tau, e, rtol=1e-12, atol=1e-15)

    def test_empty_seeds(self):
        with pytest.raises(ValueError):
            prop1_harness([])

    def test_relu_instances_avoid_kinks(self):
        for seed in range(5):
            net, X, _, _ = random_relu_net(seed)
            assert kink_margin(net, X) >= 1e-3


class TestConditioning:
    def test_orthonormal(self, rng):
        Q, _ = np.linalg.qr(rng.standard_normal((6, 6)))
        assert abs(gram_conditioning(Q).ratio - 1.0) <= 1e-8

    def test_hand_diagonal(self):
        cond = gram_conditioning(np.diag([1.0, 10.0]))
        assert abs(cond.ratio - 100.0) <= 1e-8
        assert abs(cond.lambda_max - 100.0) <= 1e-8

    def test_rank_deficient(self, rng):
        cond = gram_conditioning(rng.standard_normal((8, 3)))
        assert cond.lambda_min == 0.0 and cond.ratio == np.inf

    def test_records(self):
        line = gram_conditioning(np.eye(2)).to_records(source="toy")[0]
        assert line.startswith("check=gram_conditioning source=toy")


def test_format_record():
    assert format_record(a=1, b=0.5, c="x") == "a=1 b=0.5 c=x"


def test_rel_error_floor():
    assert rel_error(0.0, 1e-12) == pytest.approx(1e-4)
