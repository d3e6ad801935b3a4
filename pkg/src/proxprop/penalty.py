"""Quadratic penalty energy and backpropagation written as sequential
gradient steps on it.

The energy couples the layers only through quadratic penalties,

    E(theta, a, z) = loss(phi(theta_last, a_last))
                     + sum_i gamma/2 ||sigma(z_i) - a_{i+1}||^2
                           + rho/2   ||phi(theta_i, a_i) - z_i||^2,

with ``a[0] = X`` held fixed. Starting from a forward pass, one gradient step
per block (last layer first, then ``z_i``, ``a_i`` and ``theta_i`` going
backwards) reproduces a plain gradient-descent step on the network loss when
``rho = gamma = 1/tau``.
"""
from dataclasses import dataclass
from typing import List

import numpy as np

from .exceptions import DimensionError
from .network import apply_chain, chain_vjp, forward, loss_softmax_xent


@dataclass
class PenaltyParams:
    rho: float
    gamma: float
    tau: float

    @classmethod
    def matched(cls, tau):
        return cls(rho=1.0 / tau, gamma=1.0 / tau, tau=tau)

    @property
    def is_matched(self):
        return np.isclose(self.rho * self.tau, 1.0) and np.isclose(self.gamma * self.tau, 1.0)


def _sq(x):
    return float(np.vdot(x, x))


def penalty_energy(net, params, a, z, labels, rho, gamma):
    """Evaluate the penalty energy.

    ``a`` holds the inputs of every linear layer (``a[0] = X``) and ``z`` the
    outputs of every linear layer except the last.
    """
    P = net.num_linear
    if len(params) != P or len(a) != P or len(z) != P - 1:
        raise DimensionError(f"expected {P} parameters/activations and {P - 1} pre-activations")
    loss, _ = loss_softmax_xent(net.linear[-1].phi(params[-1], a[-1]), labels)
    energy = loss
    for i in range(P - 1):
        _, sig = apply_chain(net.blocks[i], z[i])
        if sig.shape != a[i + 1].shape:
            raise DimensionError(f"sigma(z[{i}]) has shape {sig.shape}, a[{i + 1}] has {a[i + 1].shape}")
        energy += 0.5 * gamma * _sq(sig - a[i + 1])
        energy += 0.5 * rho * _sq(net.linear[i].phi(params[i], a[i]) - z[i])
    return energy


@dataclass
class PenaltyTrace:
    """Intermediate half-step variables of one penalty sweep."""

    a_half: List[np.ndarray]
    z_half: List[np.ndarray]
    z_residual: List[np.ndarray]   # z_i - z_i^{k+1/2}
    diverged: bool = False


def penalty_backprop_step(net, X, labels, tau, rho=None, gamma=None, return_trace=False):
    """One pass of forward propagation followed by block gradient steps on
    the penalty energy, each with step size ``tau``.

    ``rho`` and ``gamma`` default to ``1/tau``; other values are accepted so the
    equivalence with gradient descent can be shown to break. Returns the new
    parameter list (and a :class:`PenaltyTrace` when ``return_trace``).
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    rho = 1.0 / tau if rho is None else rho
    gamma = 1.0 / tau if gamma is None else gamma
    params = net.params
    P = net.num_linear
    cache, logits = forward(net, X)
    a = list(cache.a)
    z = list(cache.z[:-1])
    new_params = [p.copy() for p in params]

    with np.errstate(over="ignore", invalid="ignore"):
        # (a) joint step on (theta_last, a_last) from the same state
        _, grad_logits = loss_softmax_xent(logits, labels)
        last = net.linear[-1]
        grad_theta = last.param_adjoint(grad_logits, a[-1])
        grad_a = last.input_adjoint(params[-1], grad_logits, a[-1].shape)
        if P > 1:
            _, sig = apply_chain(net.blocks[P - 2], z[P - 2])
            grad_a = grad_a - gamma * (sig - a[-1])
        new_params[-1] = params[-1] - tau * grad_theta
        a_half = [None] * P
        z_half = [None] * (P - 1)
        residual = [None] * (P - 1)
        a_half[-1] = a[-1] - tau * grad_a
        a[-1] = a_half[-1]

        for i in range(P - 2, -1, -1):
            layer = net.linear[i]
            # (b) z_i, then a_i using the updated z_i
            inputs, sig = apply_chain(net.blocks[i], z[i])
            fit = layer.phi(params[i], a[i]) - z[i]
            grad_z = gamma * chain_vjp(net.blocks[i], inputs, sig - a[i + 1]) - rho * fit
            z_new = z[i] - tau * grad_z
            z_half[i] = z_new
            residual[i] = cache.z[i] - z_new
            if i > 0:
                fit_new = layer.phi(params[i], a[i]) - z_new
                grad_ai = rho * layer.input_adjoint(params[i], fit_new, a[i].shape)
                _, sig_prev = apply_chain(net.blocks[i - 1], z[i - 1])
                grad_ai = grad_ai - gamma * (sig_prev - a[i])
                a_half[i] = a[i] - tau * grad_ai
            # (c) theta_i against the pre-update input a_i^k
            fit_theta = layer.phi(params[i], cache.a[i]) - z_new
            new_params[i] = params[i] - tau * rho * layer.param_adjoint(fit_theta, cache.a[i])
            z[i] = z_new
            if i > 0:
                a[i] = a_half[i]

    diverged = cache.diverged or not all(np.all(np.isfinite(p)) for p in new_params)
    if return_trace:
        return new_params, PenaltyTrace(a_half, z_half, residual, diverged)
    return new_params
