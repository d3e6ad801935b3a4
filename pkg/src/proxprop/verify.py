"""Independent checks: finite differences, descent angles, the penalty/gradient
descent equivalence harness and spectral probes.

Reports render as line-delimited ``key=value`` records (see ``to_records``).
"""
from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from .linalg import LinearOperator, inverse_power_iteration, power_iteration
from .network import (DirectionSet, Network, ReLU, forward, loss_and_grad,
                      loss_softmax_xent)
from .penalty import penalty_backprop_step
from .prox import OperatorM


def format_record(**fields):
    parts = []
    for key, value in fields.items():
        if isinstance(value, float):
            value = f"{value:.6g}"
        parts.append(f"{key}={value}")
    return " ".join(parts)


def rel_error(a, b, floor=1e-8):
    """Elementwise ``|a - b| / max(|a|, |b|, floor)``."""
    a, b = np.asarray(a), np.asarray(b)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


# ---------------------------------------------------------------------------
# finite differences


def network_loss(net, X, labels, params):
    _, logits = forward(net, X, params)
    return loss_softmax_xent(logits, labels)[0]


def finite_diff_grad(net, X, labels, h=1e-5, max_coords=500, seed=0):
    """Central-difference gradient on at most ``max_coords`` coordinates per
    layer. Unsampled entries are NaN."""
    if h <= 0:
        raise ValueError("h must be positive")
    rng = np.random.default_rng(seed)
    params = [p.copy() for p in net.params]
    out = []
    for li, p in enumerate(params):
        est = np.full(p.shape, np.nan)
        n = p.size
        coords = np.arange(n) if n <= max_coords else np.sort(rng.choice(n, max_coords, replace=False))
        flat = p.reshape(-1)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + h
            up = network_loss(net, X, labels, params)
            flat[c] = orig - h
            down = network_loss(net, X, labels, params)
            flat[c] = orig
            est.reshape(-1)[c] = (up - down) / (2 * h)
        out.append(est)
    return DirectionSet(out)


def gradient_check(net, X, labels, h=1e-5, max_coords=500, seed=0):
    """Largest relative error between backprop and central differences over
    the sampled coordinates."""
    grads = loss_and_grad(net, X, labels)
    fd = finite_diff_grad(net, X, labels, h, max_coords, seed)
    worst = 0.0
    for g, e in zip(grads, fd):
        mask = ~np.isnan(e)
        if mask.any():
            worst = max(worst, float(rel_error(g[mask], e[mask]).max()))
    return worst


def gradient_check_abs(net, X, labels, h, max_coords=500, seed=0):
    grads = loss_and_grad(net, X, labels)
    fd = finite_diff_grad(net, X, labels, h, max_coords, seed)
    return max(float(np.nanmax(np.abs(g - e))) for g, e in zip(grads, fd))


# ---------------------------------------------------------------------------
# descent angles


@dataclass
class LayerDescent:
    cos_alpha: Optional[float]
    norm_grad: float
    norm_dir: float
    lower_bound: Optional[float] = None

    @property
    def violation(self):
        return self.cos_alpha is not None and self.cos_alpha <= 0.0

    @property
    def below_bound(self):
        return (self.cos_alpha is not None and self.lower_bound is not None
                and self.cos_alpha < self.lower_bound)


@dataclass
class DescentReport:
    layers: List[LayerDescent]

    @property
    def violations(self):
        return [i for i, layer in enumerate(self.layers) if layer.violation]

    @property
    def ok(self):
        return not self.violations

    def to_records(self, **context):
        lines = []
        for i, layer in enumerate(self.layers):
            cos = "absent" if layer.cos_alpha is None else layer.cos_alpha
            bound = "absent" if layer.lower_bound is None else layer.lower_bound
            lines.append(format_record(check="descent", **context, layer=i, cos_alpha=cos,
                                       lower_bound=bound, norm_grad=layer.norm_grad,
                                       norm_dir=layer.norm_dir,
                                       status="FAIL" if layer.violation else "PASS"))
        return lines


def descent_report(dirs, grads, bounds=None):
    """Cosine between each direction and the matching gradient.

    ``bounds`` optionally supplies, per layer, the ratio
    ``lambda_min(M) / lambda_max(M)`` (equal to that of ``M^{-1}``), or None.
    """
    if len(dirs) != len(grads):
        raise ValueError(f"{len(dirs)} directions but {len(grads)} gradients")
    if bounds is not None and len(bounds) != len(dirs):
        raise ValueError("one bound per layer expected")
    layers = []
    for i, (d, g) in enumerate(zip(dirs, grads)):
        if d.shape != g.shape:
            raise ValueError(f"layer {i}: direction {d.shape} vs gradient {g.shape}")
        nd = float(np.linalg.norm(d))
        ng = float(np.linalg.norm(g))
        cos = None
        if nd >= 1e-14 and ng >= 1e-14:
            cos = float(np.clip(np.vdot(d, g) / (nd * ng), -1.0, 1.0))
        layers.append(LayerDescent(cos, ng, nd, None if bounds is None else bounds[i]))
    return DescentReport(layers)


def metric_extremes(layer, a, tau_theta, iters=300, seed=0):
    """``(lambda_min, lambda_max)`` of one layer's ProxProp metric, by inverse
    and plain power iteration."""
    opM = OperatorM(layer, a, tau_theta)
    lam_max = power_iteration(opM, iters=iters, seed=seed)
    lam_min = inverse_power_iteration(opM, iters=iters, seed=seed)
    return lam_min, lam_max


def spectral_bounds(net, X, tau_theta, params=None, iters=300, seed=0):
    """Per-layer lower bounds ``lambda_min(M)/lambda_max(M)`` on the cosine of
    the exact ProxProp direction (1 for the explicit last layer)."""
    cache, _ = forward(net, X, params)
    bounds = []
    for i, layer in enumerate(net.linear[:-1]):
        lo, hi = metric_extremes(layer, cache.a[i], tau_theta, iters, seed)
        bounds.append(lo / hi)
    bounds.append(1.0)
    return bounds


# ---------------------------------------------------------------------------
# penalty / gradient descent equivalence


def random_net(seed, activation="tanh", max_layers=3, max_width=16, max_batch=8):
    rng = np.random.default_rng(seed)
    n_linear = int(rng.integers(1, max_layers + 1))
    widths = [int(w) for w in rng.integers(1, max_width + 1, size=n_linear)]
    widths.append(int(rng.integers(2, max_width + 1)))
    net = Network.mlp(widths, activation=activation, seed=seed)
    N = int(rng.integers(1, max_batch + 1))
    X = rng.standard_normal((widths[0], N))
    y = rng.integers(0, widths[-1], size=N)
    tau = float(rng.uniform(0.05, 2.0))
    return net, X, y, tau


def kink_margin(net, X, params=None):
    """Smallest |input| over all ReLU units for the batch (inf without ReLU)."""
    cache, _ = forward(net, X, params)
    margin = np.inf
    for block, inputs in zip(net.blocks, cache.chain):
        for layer, x in zip(block, inputs):
            if isinstance(layer, ReLU):
                margin = min(margin, float(np.min(np.abs(x))))
    return margin


def random_relu_net(seed, margin=1e-3, **kwargs):
    """A random ReLU instance whose pre-activations all keep ``margin`` from
    the kink; resamples deterministically from ``seed``."""
    for attempt in range(1000):
        net, X, y, tau = random_net(seed * 1000 + attempt, activation="relu", **kwargs)
        if kink_margin(net, X) >= margin:
            return net, X, y, tau
    raise RuntimeError("no kink-free instance found")


def update_deviation(net, X, y, tau, rho=None, gamma=None):
    """Relative deviation of the penalty sweep from ``theta - tau grad J``,
    measured against the size of the gradient step."""
    grads = loss_and_grad(net, X, y)
    penalty = penalty_backprop_step(net, X, y, tau, rho=rho, gamma=gamma)
    worst = 0.0
    for p, g, new in zip(net.params, grads, penalty):
        step = tau * g
        denom = max(float(np.linalg.norm(step)), 1e-300)
        dev = float(np.linalg.norm(new - (p - step)))
        if dev > 0.0:
            worst = max(worst, dev / denom)
    return worst


@dataclass
class Prop1Report:
    seeds: List[int]
    deviations: List[float]
    threshold: float = 1e-9
    label: str = "prop1"

    @property
    def max_deviation(self):
        return max(self.deviations)

    @property
    def passed(self):
        return self.max_deviation <= self.threshold

    def to_records(self):
        lines = [format_record(check=self.label, seed=s, rel_dev=d) for s, d in
                 zip(self.seeds, self.deviations)]
        lines.append(format_record(check=self.label, seeds=len(self.seeds),
                                   max_rel_dev=self.max_deviation,
                                   status="PASS" if self.passed else "FAIL"))
        return lines


def prop1_harness(seeds, rho_scale=1.0, activation="tanh"):
    """Compare penalty-form backprop against explicit gradient descent on
    random small networks. ``rho_scale != 1`` sets ``rho = rho_scale / tau`` (a
    negative control)."""
    seeds = list(seeds)
    if not seeds:
        raise ValueError("at least one seed required")
    devs = []
    for seed in seeds:
        if activation == "tanh":
            net, X, y, tau = random_net(seed)
        else:
            net, X, y, tau = random_relu_net(seed)
        devs.append(update_deviation(net, X, y, tau, rho=rho_scale / tau))
    return Prop1Report(seeds, devs)


# ---------------------------------------------------------------------------
# conditioning


@dataclass
class Conditioning:
    lambda_max: float
    lambda_min: float
    ratio: float
    lambda_max_dense: float = float("nan")

    def to_records(self, **context):
        return [format_record(check="gram_conditioning", **context, lambda_max=self.lambda_max,
                              lambda_min=self.lambda_min, ratio=self.ratio)]


def gram_conditioning(X, power_iters=500, seed=0, rank_tol=None):
    """Extreme eigenvalues of ``X X^T`` (features x features).

    The largest eigenvalue comes from matrix-free power iteration; the
    smallest from a dense symmetric eigendecomposition of ``X X^T``. A Gram
    matrix that is numerically singular reports ``lambda_min = 0`` and an
    infinite ratio.
    """
    X = np.asarray(X, dtype=np.float64)
    X = X.reshape(-1, X.shape[-1])
    n, N = X.shape
    if X.size == 0:
        raise ValueError("empty data matrix")
    op = LinearOperator(lambda v: X @ (X.T @ v), (n,))
    lam_max = power_iteration(op, iters=power_iters, seed=seed)
    if N < n:
        return Conditioning(lam_max, 0.0, float("inf"))
    evals = np.linalg.eigvalsh(X @ X.T)
    tol = rank_tol if rank_tol is not None else n * np.finfo(float).eps * evals[-1]
    lam_min = float(evals[0])
    if lam_min <= tol:
        return Conditioning(lam_max, 0.0, float("inf"), float(evals[-1]))
    return Conditioning(lam_max, lam_min, lam_max / lam_min, float(evals[-1]))
