"""Proximal backpropagation.

The backward sweep keeps the explicit updates of the auxiliary variables
``a`` and ``z`` from penalty-form backprop, but replaces the gradient step on
every hidden linear layer by the proximal step

    theta_new = argmin_theta 1/2 ||phi(theta, a) - z_target||^2
                             + 1/(2 tau_theta) ||theta - theta_old||^2,

which is solved either in closed form (dense layers) or approximately with a
few conjugate gradient iterations on the metric

    M = I / tau_theta + (grad phi(., a)) (grad phi(., a))^*.

The last layer keeps an explicit gradient step. :func:`proxprop_directions`
packages the result as gradient-like directions ``theta_old - theta_new``
computed with an internal step of one, so any outer optimizer can apply them
with its own learning rate.
"""
from dataclasses import dataclass
from typing import List, Optional, Union

import numpy as np

from .exceptions import DimensionError, FactorizationError, NumericalBreakdown
from .linalg import LinearOperator, cg_solve, direct_spd_solve
from .network import (Conv2d, Dense, DirectionSet, chain_vjp, forward, infer_dense,
                      loss_softmax_xent)


@dataclass
class ProxConfig:
    """``mode`` is ``"exact"`` or ``"cg"``; ``cg_iters`` applies to the latter."""

    tau_theta: Optional[float] = None
    mode: str = "cg"
    cg_iters: int = 3
    cg_tol: float = 1e-10

    def __post_init__(self):
        if self.mode not in ("exact", "cg"):
            raise ValueError(f"unknown prox mode {self.mode!r}")
        if self.tau_theta is None:
            self.tau_theta = 0.05 if self.mode == "exact" else 1.0
        if self.tau_theta <= 0:
            raise ValueError("tau_theta must be positive")
        if self.mode == "cg" and self.cg_iters < 1:
            raise ValueError("cg_iters must be >= 1")

    @classmethod
    def exact(cls, tau_theta=0.05):
        return cls(tau_theta=tau_theta, mode="exact")

    @classmethod
    def cg(cls, k, tau_theta=1.0):
        return cls(tau_theta=tau_theta, mode="cg", cg_iters=k)

    @property
    def name(self):
        return "proxprop_exact" if self.mode == "exact" else f"proxprop_cg{self.cg_iters}"


@dataclass
class SweepTargets:
    """Half-step variables ``a^{k+1/2}`` and ``z^{k+1/2}``.

    ``a_half[i]`` targets the input of linear layer ``i`` (entry 0 unused);
    ``z_half[i]`` targets the output of hidden linear layer ``i``.
    """

    a_half: List[Optional[np.ndarray]]
    z_half: List[np.ndarray]
    loss: float
    diverged: bool = False


def backward_sweep(net, cache, labels, tau=1.0, params=None):
    """Explicit updates of the auxiliary variables, last layer first."""
    params = net.params if params is None else params
    P = net.num_linear
    with np.errstate(over="ignore", invalid="ignore"):
        loss, grad_logits = loss_softmax_xent(cache.logits, labels)
        a_half = [None] * P
        z_half = [None] * (P - 1)
        last = net.linear[-1]
        a_half[-1] = cache.a[-1] - tau * last.input_adjoint(params[-1], grad_logits, cache.a[-1].shape)
        for i in range(P - 2, -1, -1):
            block, inputs = net.blocks[i], cache.chain[i]
            # sigma(z_i) = a_{i+1} exactly after a forward pass
            z_half[i] = cache.z[i] - chain_vjp(block, inputs, cache.a[i + 1] - a_half[i + 1])
            if i > 0:
                layer = net.linear[i]
                a_half[i] = cache.a[i] - layer.input_adjoint(
                    params[i], cache.z[i] - z_half[i], cache.a[i].shape)
    finite = np.isfinite(loss) and all(np.all(np.isfinite(z)) for z in z_half)
    return SweepTargets(a_half, z_half, loss, diverged=cache.diverged or not finite)


def _layer_for(theta, a, layer):
    return infer_dense(theta, a) if layer is None else layer


class OperatorM:
    """The SPD metric ``v / tau_theta + grad phi(grad phi^*(v))`` of one layer,
    applied matrix-free through a forward and a parameter-adjoint pass."""

    def __init__(self, layer, a, tau_theta):
        if tau_theta <= 0:
            raise ValueError("tau_theta must be positive")
        self.layer = layer
        self.tau_theta = float(tau_theta)
        self.lowered = layer.lower(a)
        self.shape = layer.param_shape

    @property
    def dim(self):
        return int(np.prod(self.shape))

    def __call__(self, v):
        if v.shape != self.shape:
            raise DimensionError(f"expected a {self.shape} direction, got {v.shape}")
        A = self.lowered
        return v / self.tau_theta + (v @ A) @ A.T

    def as_operator(self):
        return LinearOperator(self, self.shape)


def apply_M(opM, v):
    return opM(v)


def prox_step_exact(theta, a, z_target, tau_theta, layer=None):
    """Closed-form proximal step of a dense layer.

    ``theta_new = (z_target Â^T + theta / tau_theta)(Â Â^T + I / tau_theta)^{-1}``
    with ``Â`` the (ones-augmented) activation; the system has one row per
    input feature, independent of the batch size.
    """
    layer = _layer_for(theta, a, layer)
    if not isinstance(layer, Dense):
        raise NotImplementedError("the closed-form prox is only provided for dense layers")
    if tau_theta <= 0:
        raise ValueError("tau_theta must be positive")
    A = layer.lower(a)
    system = A @ A.T + np.eye(A.shape[0]) / tau_theta
    rhs = z_target @ A.T + theta / tau_theta
    # theta_new @ system = rhs, and system is symmetric
    return direct_spd_solve(system, rhs.T).T


def prox_step_cg(theta, a, z_target, tau_theta, k_cg, layer=None, tol=1e-10, return_iters=False):
    """Proximal step approximated with ``k_cg`` CG iterations from zero.

    The step solves ``M v = -g`` with ``g = grad phi(., a)(phi(theta, a) -
    z_target)`` and returns ``theta + v``. Residuals are re-orthogonalized,
    so ``k_cg = dim(theta)`` reproduces the exact step despite rounding.
    """
    layer = _layer_for(theta, a, layer)
    if k_cg < 1:
        raise ValueError("k_cg must be >= 1")
    opM = OperatorM(layer, a, tau_theta)
    A = opM.lowered
    g = (theta @ A - layer.flatten_output(z_target)) @ A.T
    v, iters = cg_solve(opM, -g, max_iters=k_cg, tol=tol, reorthogonalize=True)
    if return_iters:
        return theta + v, iters
    return theta + v


def prox_step(theta, a, z_target, config, layer=None):
    if config.mode == "exact":
        if layer is not None and isinstance(layer, Conv2d):
            raise NotImplementedError("exact prox mode supports dense layers only; use cg")
        return prox_step_exact(theta, a, z_target, config.tau_theta, layer)
    return prox_step_cg(theta, a, z_target, config.tau_theta, config.cg_iters, layer, config.cg_tol)


def proxprop_directions(net, X, labels, config: Union[ProxConfig, None] = None, params=None):
    """ProxProp update directions for every linear layer.

    Hidden layers get ``theta - prox(theta)`` (with an internal step of one);
    the last layer gets the plain gradient. Parameters are not modified.
    """
    config = config or ProxConfig()
    params = net.params if params is None else params
    cache, _ = forward(net, X, params)
    sweep = backward_sweep(net, cache, labels, tau=1.0, params=params)
    P = net.num_linear
    dirs = []
    broke = False
    with np.errstate(over="ignore", invalid="ignore"):
        for i in range(P - 1):
            layer = net.linear[i]
            try:
                new = prox_step(params[i], cache.a[i], sweep.z_half[i], config, layer)
            except (NumericalBreakdown, FactorizationError):
                broke = True
                new = np.full_like(params[i], np.nan)
            dirs.append(params[i] - new)
        # explicit step on the last layer: its gradient
        _, grad_logits = loss_softmax_xent(cache.logits, labels)
        dirs.append(net.linear[-1].param_adjoint(grad_logits, cache.a[-1]))
    diverged = broke or sweep.diverged or not all(np.all(np.isfinite(d)) for d in dirs)
    return DirectionSet(dirs, implicit=[True] * (P - 1) + [False], loss=sweep.loss,
                        diverged=diverged)
