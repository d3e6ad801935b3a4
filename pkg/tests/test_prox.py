import numpy as np
import pytest

from proxprop.exceptions import DimensionError
from proxprop.linalg import power_iteration, inverse_power_iteration
from proxprop.network import (Conv2d, Dense, MaxPool2d, Network, ReLU, Flatten, Tanh,
                              forward, loss_and_grad, loss_softmax_xent)
from proxprop.prox import (OperatorM, ProxConfig, apply_M, backward_sweep, prox_step,
                           prox_step_cg, prox_step_exact, proxprop_directions)
from proxprop.verify import descent_report, random_net, spectral_bounds


def dense_phi_matrix(layer, a):
    """Explicit matrix of theta -> vec(phi(theta, a))."""
    cols = []
    for j in range(int(np.prod(layer.param_shape))):
        e = np.zeros(layer.param_shape)
        e.reshape(-1)[j] = 1.0
        cols.append(layer.phi(e, a).reshape(-1))
    return np.array(cols).T


def rel_norm(x, y):
    return np.linalg.norm(x - y) / max(np.linalg.norm(y), 1e-300)


class TestConfig:
    def test_defaults(self):
        assert ProxConfig.cg(3).tau_theta == 1.0
        assert ProxConfig.exact().tau_theta == 0.05
        assert ProxConfig.cg(5).name == "proxprop_cg5"

    @pytest.mark.parametrize("kwargs", [dict(mode="cg", cg_iters=0), dict(tau_theta=-1.0),
                                        dict(mode="newton")])
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            ProxConfig(**kwargs)


class TestSweep:
    def test_single_layer(self, rng):
        net = Network.mlp([3, 4], seed=0)
        X = rng.standard_normal((3, 5))
        y = rng.integers(0, 4, 5)
        cache, logits = forward(net, X)
        sweep = backward_sweep(net, cache, y, tau=0.7)
        _, grad = loss_softmax_xent(logits, y)
        # the update of the last layer's input
        expected = cache.a[0] - 0.7 * net.params[0][:, :-1].T @ grad
        np.testing.assert_allclose(sweep.a_half[0], expected, rtol=1e-14)

    def test_zero_gradient_keeps_cache(self, rng):
        # a saturated correct class makes grad_logits exactly zero in floating point
        net = Network.mlp([2, 3, 2], activation="tanh", seed=0)
        net.params[-1][0, -1] = 1000.0
        cache, _ = forward(net, rng.standard_normal((2, 4)))
        sweep = backward_sweep(net, cache, np.zeros(4, dtype=int))
        np.testing.assert_array_equal(sweep.z_half[0], cache.z[0])
        np.testing.assert_array_equal(sweep.a_half[1], cache.a[1])

    def test_residual_matches_chain_rule(self):
        from proxprop.network import backprop_deltas
        for seed in range(10):
            net, X, y, tau = random_net(seed, max_layers=4)
            cache, logits = forward(net, X)
            sweep = backward_sweep(net, cache, y, tau)
            deltas = backprop_deltas(net, cache, loss_softmax_xent(logits, y)[1])
            for i, zh in enumerate(sweep.z_half):
                assert rel_norm(cache.z[i] - zh, tau * deltas[i]) <= 1e-9

    def test_elementwise_form(self, rng):
        # for tanh the Jacobian-adjoint form equals sigma'(z) * (sigma(z) - a_half)
        net = Network.mlp([3, 5, 4, 2], activation="tanh", seed=4)
        X = rng.standard_normal((3, 6))
        y = rng.integers(0, 2, 6)
        cache, _ = forward(net, X)
        sweep = backward_sweep(net, cache, y, tau=0.3)
        for i, zh in enumerate(sweep.z_half):
            z = cache.z[i]
            expected = z - (1 - np.tanh(z) ** 2) * (np.tanh(z) - sweep.a_half[i + 1])
            np.testing.assert_allclose(zh, expected, rtol=1e-13, atol=1e-15)

    def test_maxpool_chain(self, rng):
        layers = [Conv2d(1, 2, 3, padding=1), ReLU(), MaxPool2d(2), Flatten(), Dense(8, 3)]
        net = Network(layers, (1, 4, 4), seed=0)
        X = rng.standard_normal((1, 4, 4, 2))
        cache, _ = forward(net, X)
        sweep = backward_sweep(net, cache, np.array([0, 2]))
        diff = cache.z[0] - sweep.z_half[0]
        # only pooled-and-active positions receive a correction: at most one per window
        per_window = (diff != 0).reshape(2, 2, 2, 2, 2, 2).sum(axis=(2, 4))
        assert per_window.max() <= 1


class TestExactProx:
    def test_fixed_point(self, rng):
        theta = rng.standard_normal((3, 5))
        a = rng.standard_normal((4, 6))
        z = Dense(4, 3).phi(theta, a)
        np.testing.assert_allclose(prox_step_exact(theta, a, z, 0.7), theta, atol=1e-12)

    def test_scalar(self):
        out = prox_step_exact(np.zeros((1, 1)), np.ones((1, 1)), np.array([[2.0]]), 1.0)
        np.testing.assert_allclose(out, [[1.0]], rtol=1e-15)

    def test_vanishing_step(self, rng):
        theta = rng.standard_normal((3, 5))
        a = rng.standard_normal((4, 6))
        out = prox_step_exact(theta, a, rng.standard_normal((3, 6)), 1e-12)
        np.testing.assert_allclose(out, theta, rtol=0, atol=1e-9)

    def test_optimality(self, rng):
        # gradient of the prox objective vanishes at the solution
        layer = Dense(4, 3)
        theta = rng.standard_normal(layer.param_shape)
        a = rng.standard_normal((4, 7))
        z = rng.standard_normal((3, 7))
        new = prox_step_exact(theta, a, z, 0.3)
        grad = layer.param_adjoint(layer.phi(new, a) - z, a) + (new - theta) / 0.3
        assert np.linalg.norm(grad) <= 1e-10

    def test_conv_rejected(self, rng):
        layer = Conv2d(1, 1, 2)
        with pytest.raises(NotImplementedError):
            prox_step(layer.init_params(rng), np.zeros((1, 3, 3, 1)), np.zeros((1, 2, 2, 1)),
                      ProxConfig.exact(), layer)

    @pytest.mark.parametrize("tau_theta", [0.01, 1.0, 100.0])
    def test_block_descent(self, rng, tau_theta):
        layer = Dense(5, 4)
        theta = rng.standard_normal(layer.param_shape)
        a = rng.standard_normal((5, 9))
        z = rng.standard_normal((4, 9))

        def fit(t):
            return 0.5 * np.sum((layer.phi(t, a) - z) ** 2)

        new = prox_step_exact(theta, a, z, tau_theta)
        assert fit(new) + 0.5 / tau_theta * np.sum((new - theta) ** 2) <= fit(theta) + 1e-12

    @pytest.mark.parametrize("tau_theta", [0.01, 1.0, 100.0])
    def test_proximal_point_monotone(self, rng, tau_theta):
        layer = Dense(6, 3)
        theta = rng.standard_normal(layer.param_shape)
        a = rng.standard_normal((6, 4))
        z = rng.standard_normal((3, 4))
        values = []
        for _ in range(30):
            values.append(0.5 * np.sum((layer.phi(theta, a) - z) ** 2))
            theta = prox_step_exact(theta, a, z, tau_theta)
        assert np.all(np.diff(values) <= 1e-12 * values[0])


class TestOperatorM:
    def test_zero_activation(self, rng):
        layer = Dense(3, 2, bias=False)
        v = rng.standard_normal(layer.param_shape)
        np.testing.assert_allclose(apply_M(OperatorM(layer, np.zeros((3, 4)), 0.5), v), v / 0.5)

    @pytest.mark.parametrize("layer, in_shape", [
        (Dense(4, 3), (4,)), (Conv2d(2, 2, 2, stride=1, padding=1), (2, 3, 3)),
    ])
    def test_dense_materialization(self, rng, layer, in_shape):
        a = rng.standard_normal(in_shape + (2,))
        A = dense_phi_matrix(layer, a)
        M = np.eye(A.shape[1]) / 0.4 + A.T @ A
        opM = OperatorM(layer, a, 0.4)
        v = rng.standard_normal(layer.param_shape)
        np.testing.assert_allclose(apply_M(opM, v).reshape(-1), M @ v.reshape(-1), rtol=1e-10)

    def test_symmetric(self, rng):
        layer = Conv2d(2, 3, 3, padding=1)
        opM = OperatorM(layer, rng.standard_normal((2, 4, 4, 3)), 0.8)
        v, w = rng.standard_normal((2,) + layer.param_shape)
        lhs, rhs = np.vdot(opM(v), w), np.vdot(v, opM(w))
        assert abs(lhs - rhs) <= 1e-10 * abs(lhs)

    def test_smallest_eigenvalue(self, rng):
        for tau_theta in (0.05, 1.0, 20.0):
            opM = OperatorM(Dense(4, 2), rng.standard_normal((4, 3)), tau_theta)
            lam = inverse_power_iteration(opM, iters=200)
            assert lam >= (1 - 1e-8) / tau_theta

    def test_shape_mismatch(self, rng):
        opM = OperatorM(Dense(4, 2), rng.standard_normal((4, 3)), 1.0)
        with pytest.raises(DimensionError):
            opM(np.zeros((2, 4)))


class TestCGProx:
    def test_zero_gradient(self, rng):
        theta = rng.standard_normal((3, 5))
        a = rng.standard_normal((4, 6))
        z = Dense(4, 3).phi(theta, a)
        np.testing.assert_array_equal(prox_step_cg(theta, a, z, 1.0, 3), theta)

    @pytest.mark.parametrize("n_in, n_out", [(1, 1), (3, 2), (5, 4), (7, 8)])
    def test_full_iterations_match_exact(self, rng, n_in, n_out):
        theta = rng.standard_normal((n_out, n_in + 1))
        a = rng.standard_normal((n_in, 6))
        z = rng.standard_normal((n_out, 6))
        exact = prox_step_exact(theta, a, z, 0.5)
        cg = prox_step_cg(theta, a, z, 0.5, theta.size)
        assert rel_norm(cg, exact) <= 1e-8

    def test_one_iteration_descends(self, rng):
        for _ in range(20):
            layer = Dense(5, 3)
            theta = rng.standard_normal(layer.param_shape)
            a = rng.standard_normal((5, 4))
            z = rng.standard_normal((3, 4))
            g = layer.param_adjoint(layer.phi(theta, a) - z, a)
            v = prox_step_cg(theta, a, z, 1.0, 1) - theta
            assert np.vdot(v, -g) > 0

    def test_conv_layer(self, rng):
        layer = Conv2d(1, 2, 3, padding=1)
        theta = layer.init_params(rng)
        a = rng.standard_normal((1, 4, 4, 2))
        z = rng.standard_normal((2, 4, 4, 2))
        new, iters = prox_step_cg(theta, a, z, 1.0, 2, layer=layer, return_iters=True)
        assert iters == 2 and new.shape == theta.shape


class TestDirections:
    def test_last_layer_is_gradient(self):
        net, X, y, _ = random_net(3)
        dirs = proxprop_directions(net, X, y, ProxConfig.cg(3))
        np.testing.assert_allclose(dirs[-1], loss_and_grad(net, X, y)[-1], rtol=1e-14)
        assert dirs.implicit[-1] is False

    def test_parameters_untouched(self):
        net, X, y, _ = random_net(5)
        before = [p.copy() for p in net.params]
        proxprop_directions(net, X, y, ProxConfig.exact())
        for p, q in zip(before, net.params):
            np.testing.assert_array_equal(p, q)

    def test_vanishing_tau_theta(self):
        net = Network.mlp([4, 6, 5, 3], activation="tanh", seed=1)
        X = np.random.default_rng(1).standard_normal((4, 5))
        y = np.array([0, 1, 2, 0, 1])
        dirs = proxprop_directions(net, X, y, ProxConfig.exact(1e-12))
        for d in dirs.dirs[:-1]:
            assert np.abs(d).max() <= 1e-9
        np.testing.assert_allclose(dirs[-1], loss_and_grad(net, X, y)[-1], rtol=1e-14)

    @pytest.mark.parametrize("seed", range(10))
    def test_metric_characterization(self, seed):
        # M g~ = grad J for the exact proximal direction
        net, X, y, _ = random_net(seed, max_layers=4)
        config = ProxConfig.exact(0.3)
        dirs = proxprop_directions(net, X, y, config)
        grads = loss_and_grad(net, X, y)
        cache, _ = forward(net, X)
        for i in range(net.num_linear - 1):
            opM = OperatorM(net.linear[i], cache.a[i], 0.3)
            assert rel_norm(opM(dirs[i]), grads[i]) <= 1e-8

    def test_dense_oracle(self):
        net, X, y, _ = random_net(11, max_layers=4)
        dirs = proxprop_directions(net, X, y, ProxConfig.exact(0.2))
        grads = loss_and_grad(net, X, y)
        cache, _ = forward(net, X)
        for i in range(net.num_linear - 1):
            A = dense_phi_matrix(net.linear[i], cache.a[i])
            M = np.eye(A.shape[1]) / 0.2 + A.T @ A
            expected = np.linalg.solve(M, grads[i].reshape(-1)).reshape(grads[i].shape)
            assert rel_norm(dirs[i], expected) <= 1e-8

    def test_stationary_points(self):
        # identical inputs with balanced labels; bias fitted to the frequencies
        net = Network.mlp([3, 5, 4, 2], activation="tanh", seed=2)
        X = np.tile(np.array([[0.3], [-1.0], [2.0]]), (1, 4))
        y = np.array([0, 1, 1, 0])
        _, logits = forward(net, X)
        net.params[-1][:, -1] -= logits[:, 0]
        assert loss_and_grad(net, X, y).norm() <= 1e-8
        for config in (ProxConfig.exact(0.5), ProxConfig.cg(3)):
            assert proxprop_directions(net, X, y, config).norm() <= 1e-7

    def test_nonzero_gradient_gives_nonzero_direction(self):
        # ||grad|| <= lambda_max(M) ||g~||, so g~ = 0 forces grad = 0
        for seed in range(10):
            net, X, y, _ = random_net(seed)
            dirs = proxprop_directions(net, X, y, ProxConfig.exact(1.0))
            grads = loss_and_grad(net, X, y)
            cache, _ = forward(net, X)
            for i in range(net.num_linear - 1):
                lam = power_iteration(OperatorM(net.linear[i], cache.a[i], 1.0), iters=500)
                assert np.linalg.norm(grads[i]) <= lam * np.linalg.norm(dirs[i]) * (1 + 1e-6)

    @pytest.mark.parametrize("k", [1, 3, 5, 10])
    def test_cg_descent(self, k):
        for seed in range(25):
            net, X, y, _ = random_net(seed)
            report = descent_report(proxprop_directions(net, X, y, ProxConfig.cg(k)),
                                    loss_and_grad(net, X, y))
            assert report.ok, (seed, report.violations)

    def test_exact_angle_bound(self):
        for seed in range(15):
            net, X, y, _ = random_net(seed)
            bounds = spectral_bounds(net, X, 0.5)
            report = descent_report(proxprop_directions(net, X, y, ProxConfig.exact(0.5)),
                                    loss_and_grad(net, X, y), bounds)
            for layer in report.layers:
                if layer.cos_alpha is not None:
                    assert layer.cos_alpha >= layer.lower_bound - 1e-8

    def test_conv_network(self, rng):
        layers = [Conv2d(1, 2, 3, padding=1), Tanh(), MaxPool2d(2), Flatten(), Dense(8, 3)]
        net = Network(layers, (1, 4, 4), seed=0)
        X = rng.standard_normal((1, 4, 4, 3))
        y = np.array([0, 1, 2])
        dirs = proxprop_directions(net, X, y, ProxConfig.cg(3))
        assert not dirs.diverged
        assert descent_report(dirs, loss_and_grad(net, X, y)).ok
