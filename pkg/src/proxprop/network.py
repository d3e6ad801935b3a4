"""Feed-forward networks built from alternating linear and nonlinear transfers.

Activations keep the sample index last: fully-connected activations are
``(features, N)`` matrices (one column per sample) and convolutional ones are
``(channels, height, width, N)`` arrays.

Every linear layer carries a single parameter matrix ``theta`` in augmented
form ``[W b]``. Its action is ``theta @ lower(a)`` where ``lower`` arranges
the input as a ``(fan_in [+1], positions)`` matrix and appends a row of ones
when the layer has a bias. For a dense layer ``lower(a) = [a; 1]``; for a
convolution it is the im2col patch matrix plus the ones row. This way the
parameter gradient, the proximal step and the metric of the implicit update
are written once for both layer kinds.
"""
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .exceptions import ConsistencyError, DimensionError
from .linalg import gemm


# ---------------------------------------------------------------------------
# linear transfers


class Linear:
    """Base class for parametric layers ``phi(theta, a) = theta @ lower(a)``."""

    parametric = True
    bias = True

    @property
    def fan_in(self):
        raise NotImplementedError

    @property
    def param_shape(self):
        return (self.n_out, self.fan_in + int(self.bias))

    def lower(self, a):
        raise NotImplementedError

    def flatten_output(self, y):
        """Arrange an output-shaped array as ``(n_out, positions)``."""
        raise NotImplementedError

    def lower_adjoint(self, cols, in_shape):
        raise NotImplementedError

    def phi(self, theta, a):
        self._check_theta(theta)
        return gemm(theta, self.lower(a))

    def param_adjoint(self, residual, a):
        """Gradient of ``<phi(theta, a), residual>`` with respect to ``theta``."""
        return gemm(self.flatten_output(residual), self.lower(a).T)

    def input_adjoint(self, theta, residual, in_shape):
        """Gradient of ``<phi(theta, a), residual>`` with respect to ``a``."""
        self._check_theta(theta)
        weights = theta[:, : self.fan_in]
        return self.lower_adjoint(gemm(weights.T, self.flatten_output(residual)), in_shape)

    def init_params(self, rng):
        bound = 1.0 / np.sqrt(self.fan_in)
        return rng.uniform(-bound, bound, size=self.param_shape)

    def _check_theta(self, theta):
        if theta.shape != self.param_shape:
            raise DimensionError(f"{self!r}: parameter shape {theta.shape} != {self.param_shape}")


class Dense(Linear):
    def __init__(self, n_in, n_out, bias=True):
        self.n_in = int(n_in)
        self.n_out = int(n_out)
        self.bias = bias

    def __repr__(self):
        return f"Dense({self.n_in}, {self.n_out}, bias={self.bias})"

    @property
    def fan_in(self):
        return self.n_in

    def output_shape(self, in_shape):
        if tuple(in_shape) != (self.n_in,):
            raise DimensionError(f"{self!r} cannot take input of shape {in_shape}")
        return (self.n_out,)

    def lower(self, a):
        if a.ndim != 2 or a.shape[0] != self.n_in:
            raise DimensionError(f"{self!r} got activation of shape {a.shape}")
        if not self.bias:
            return a
        return np.vstack([a, np.ones((1, a.shape[1]))])

    def flatten_output(self, y):
        if y.ndim != 2 or y.shape[0] != self.n_out:
            raise DimensionError(f"{self!r} got residual of shape {y.shape}")
        return y

    def lower_adjoint(self, cols, in_shape):
        return cols


class Conv2d(Linear):
    """2-D convolution (cross-correlation) lowered to a patch matrix."""

    def __init__(self, in_ch, out_ch, kernel, stride=1, padding=0, bias=True):
        self.in_ch = int(in_ch)
        self.n_out = int(out_ch)
        self.kernel = int(kernel)
        self.stride = int(stride)
        self.padding = int(padding)
        self.bias = bias

    def __repr__(self):
        return (f"Conv2d({self.in_ch}, {self.n_out}, kernel={self.kernel}, "
                f"stride={self.stride}, padding={self.padding}, bias={self.bias})")

    @property
    def fan_in(self):
        return self.in_ch * self.kernel * self.kernel

    def _spatial_out(self, h, w):
        k, s, p = self.kernel, self.stride, self.padding
        return (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1

    def output_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[0] != self.in_ch:
            raise DimensionError(f"{self!r} cannot take input of shape {in_shape}")
        ho, wo = self._spatial_out(in_shape[1], in_shape[2])
        if ho < 1 or wo < 1:
            raise DimensionError(f"{self!r}: kernel larger than padded input {in_shape}")
        return (self.n_out, ho, wo)

    def lower(self, a):
        if a.ndim != 4 or a.shape[0] != self.in_ch:
            raise DimensionError(f"{self!r} got activation of shape {a.shape}")
        C, H, W, N = a.shape
        k, s, p = self.kernel, self.stride, self.padding
        ho, wo = self._spatial_out(H, W)
        xp = np.pad(a, ((0, 0), (p, p), (p, p), (0, 0))) if p else a
        rows = C * k * k + int(self.bias)
        cols = np.empty((rows, ho * wo * N))
        view = cols[: C * k * k].reshape(C, k, k, ho, wo, N)
        for i in range(k):
            for j in range(k):
                view[:, i, j] = xp[:, i:i + s * ho:s, j:j + s * wo:s, :]
        if self.bias:
            cols[-1] = 1.0
        return cols

    def lower_adjoint(self, cols, in_shape):
        C, H, W, N = in_shape
        k, s, p = self.kernel, self.stride, self.padding
        ho, wo = self._spatial_out(H, W)
        view = cols.reshape(C, k, k, ho, wo, N)
        xp = np.zeros((C, H + 2 * p, W + 2 * p, N))
        for i in range(k):
            for j in range(k):
                xp[:, i:i + s * ho:s, j:j + s * wo:s, :] += view[:, i, j]
        return xp[:, p:p + H, p:p + W, :]

    def flatten_output(self, y):
        if y.ndim != 4 or y.shape[0] != self.n_out:
            raise DimensionError(f"{self!r} got residual of shape {y.shape}")
        return y.reshape(self.n_out, -1)

    def phi(self, theta, a):
        self._check_theta(theta)
        ho, wo = self._spatial_out(a.shape[1], a.shape[2])
        return gemm(theta, self.lower(a)).reshape(self.n_out, ho, wo, a.shape[-1])


# ---------------------------------------------------------------------------
# parameter-free transfers


class Nonlinear:
    parametric = False

    def output_shape(self, in_shape):
        return tuple(in_shape)

    def forward(self, x):
        raise NotImplementedError

    def vjp(self, x, g):
        """Apply the transposed Jacobian at ``x`` to ``g``."""
        raise NotImplementedError

    def jvp(self, x, v):
        """Apply the Jacobian at ``x`` to ``v``."""
        raise NotImplementedError

    def __repr__(self):
        return f"{type(self).__name__}()"


class ReLU(Nonlinear):
    smooth = False

    def forward(self, x):
        return np.maximum(x, 0.0)

    def derivative(self, x):
        # sigma'(0) = 0
        return (x > 0).astype(x.dtype)

    def vjp(self, x, g):
        return self.derivative(x) * g

    jvp = vjp


class Tanh(Nonlinear):
    smooth = True

    def forward(self, x):
        return np.tanh(x)

    def derivative(self, x):
        return 1.0 - np.tanh(x) ** 2

    def vjp(self, x, g):
        return self.derivative(x) * g

    jvp = vjp


class Flatten(Nonlinear):
    """Reshape ``(C, H, W, N)`` to ``(C*H*W, N)``; linear, kept in the sigma chain."""

    smooth = True

    def output_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, x):
        return x.reshape(-1, x.shape[-1])

    def vjp(self, x, g):
        return g.reshape(x.shape)

    jvp = vjp


class MaxPool2d(Nonlinear):
    """Max pooling over ``window x window`` patches; ties go to the first index
    in row-major scan order."""

    smooth = False

    def __init__(self, window=2, stride=None):
        self.window = int(window)
        self.stride = int(stride or window)

    def __repr__(self):
        return f"MaxPool2d(window={self.window}, stride={self.stride})"

    def output_shape(self, in_shape):
        C, H, W = in_shape
        k, s = self.window, self.stride
        return (C, (H - k) // s + 1, (W - k) // s + 1)

    def _windows(self, x):
        k, s = self.window, self.stride
        win = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(1, 2))
        win = win[:, ::s, ::s]
        # (C, Ho, Wo, N, k, k) -> (C, Ho, Wo, N, k*k)
        return win.reshape(win.shape[:4] + (k * k,))

    def argmax(self, x):
        return np.argmax(self._windows(x), axis=-1)

    def forward(self, x):
        return np.max(self._windows(x), axis=-1)

    def vjp(self, x, g):
        k, s = self.window, self.stride
        idx = self.argmax(x)
        _, ho, wo, _ = idx.shape
        out = np.zeros_like(x)
        for i in range(k):
            for j in range(k):
                out[:, i:i + s * ho:s, j:j + s * wo:s, :] += np.where(idx == i * k + j, g, 0.0)
        return out

    def jvp(self, x, v):
        idx = self.argmax(x)
        return np.take_along_axis(self._windows(v), idx[..., None], axis=-1)[..., 0]


# ---------------------------------------------------------------------------
# network


@dataclass
class ForwardCache:
    """Activations recorded by :func:`forward`.

    ``a[i]`` is the input to linear layer ``i`` (``a[0] = X``) and ``z[i]`` its
    output. ``chain[i]`` lists the inputs of every nonlinearity between linear
    layers ``i`` and ``i + 1`` (so ``chain[i][0] is z[i]``).
    """

    a: List[np.ndarray]
    z: List[np.ndarray]
    chain: List[List[np.ndarray]]
    diverged: bool = False

    @property
    def batch_size(self):
        return self.a[0].shape[-1]

    @property
    def logits(self):
        return self.z[-1]


@dataclass
class DirectionSet:
    """Per-layer update directions; ``implicit[i]`` marks proximal layers."""

    dirs: List[np.ndarray]
    implicit: List[bool] = field(default_factory=list)
    loss: Optional[float] = None
    diverged: bool = False

    def __post_init__(self):
        if not self.implicit:
            self.implicit = [False] * len(self.dirs)

    def __len__(self):
        return len(self.dirs)

    def __iter__(self):
        return iter(self.dirs)

    def __getitem__(self, i):
        return self.dirs[i]

    def norm(self):
        return float(np.sqrt(sum(np.vdot(d, d) for d in self.dirs)))


class Network:
    """An alternating chain of linear and parameter-free layers ending in
    softmax cross-entropy.

    ``params[i]`` is the augmented parameter matrix of the ``i``-th linear
    layer. Parameters live next to the layer list so that optimizers can swap
    them without touching the structure.
    """

    def __init__(self, layers, input_shape, params=None, seed=0):
        self.layers = list(layers)
        self.input_shape = tuple(input_shape)
        if not self.layers or not self.layers[0].parametric:
            raise DimensionError("a network must start with a linear layer")
        if not self.layers[-1].parametric:
            raise DimensionError("the last layer must be linear (its output are the logits)")
        shape = self.input_shape
        self.shapes = [shape]
        for layer in self.layers:
            shape = layer.output_shape(shape)
            self.shapes.append(shape)
        if len(shape) != 1:
            raise DimensionError(f"network output must be a vector, got shape {shape}")
        self.linear = [layer for layer in self.layers if layer.parametric]
        # nonlinear blocks following each linear layer but the last
        self.blocks = [[] for _ in self.linear]
        i = -1
        for layer in self.layers:
            if layer.parametric:
                i += 1
            else:
                self.blocks[i].append(layer)
        if params is None:
            rng = np.random.default_rng(seed)
            params = [layer.init_params(rng) for layer in self.linear]
        self.params = [np.asarray(p, dtype=np.float64) for p in params]
        for layer, p in zip(self.linear, self.params):
            layer._check_theta(p)

    @classmethod
    def mlp(cls, widths, activation="relu", seed=0, bias=True):
        """Fully-connected network, e.g. ``widths = [3072, 4000, 1000, 4000, 10]``."""
        act = {"relu": ReLU, "tanh": Tanh}[activation]
        layers = []
        for i, (n_in, n_out) in enumerate(zip(widths[:-1], widths[1:])):
            if i > 0:
                layers.append(act())
            layers.append(Dense(n_in, n_out, bias=bias))
        return cls(layers, (widths[0],), seed=seed)

    @property
    def num_classes(self):
        return self.shapes[-1][0]

    @property
    def num_linear(self):
        return len(self.linear)

    def with_params(self, params):
        return Network(self.layers, self.input_shape, params=[p.copy() for p in params])

    def copy(self):
        return self.with_params(self.params)

    def __repr__(self):
        inner = ", ".join(repr(layer) for layer in self.layers)
        return f"Network([{inner}], input_shape={self.input_shape})"


def apply_chain(block, x):
    """Run a nonlinear block; returns the input of every layer and the output."""
    inputs = []
    for layer in block:
        inputs.append(x)
        x = layer.forward(x)
    return inputs, x


def chain_vjp(block, inputs, g):
    """Transposed Jacobian of a nonlinear block applied to ``g``."""
    for layer, x in zip(reversed(block), reversed(inputs)):
        g = layer.vjp(x, g)
    return g


def chain_jvp(block, inputs, v):
    for layer, x in zip(block, inputs):
        v = layer.jvp(x, v)
    return v


def _as_input(net, X):
    X = np.asarray(X, dtype=np.float64)
    if X.shape[:-1] != net.input_shape:
        if X.ndim == 2 and X.shape[0] == int(np.prod(net.input_shape)):
            return X.reshape(net.input_shape + (X.shape[1],))
        raise DimensionError(f"input of shape {X.shape} does not fit {net.input_shape}")
    return X


def forward(net, X, params=None):
    """Forward pass recording pre-activations and activations.

    Returns ``(cache, logits)``. Non-finite values set ``cache.diverged``
    rather than raising.
    """
    params = net.params if params is None else params
    a = _as_input(net, X)
    A, Z, chains = [], [], []
    with np.errstate(over="ignore", invalid="ignore"):
        for i, (layer, theta) in enumerate(zip(net.linear, params)):
            A.append(a)
            z = layer.phi(theta, a)
            Z.append(z)
            if i < net.num_linear - 1:
                inputs, a = apply_chain(net.blocks[i], z)
                chains.append(inputs)
    logits = Z[-1]
    cache = ForwardCache(A, Z, chains, diverged=not np.all(np.isfinite(logits)))
    return cache, logits


def predict(net, X, params=None, chunk=1000):
    """Logits computed in chunks of samples (no cache kept)."""
    X = _as_input(net, X)
    n = X.shape[-1]
    out = []
    for start in range(0, n, chunk):
        _, logits = forward(net, X[..., start:start + chunk], params)
        out.append(logits)
    return np.concatenate(out, axis=1) if out else np.zeros((net.num_classes, 0))


def loss_softmax_xent(logits, labels):
    """Mean softmax cross-entropy over the columns of ``logits``.

    Returns ``(loss, grad_logits)``.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    K, N = logits.shape
    if labels.shape != (N,):
        raise DimensionError(f"{N} columns but {labels.shape} labels")
    if N and (labels.min() < 0 or labels.max() >= K):
        raise ValueError(f"labels must lie in [0, {K})")
    with np.errstate(over="ignore", invalid="ignore"):
        shifted = logits - logits.max(axis=0, keepdims=True)
        logsumexp = np.log(np.exp(shifted).sum(axis=0))
        cols = np.arange(N)
        loss = float(np.mean(logsumexp - shifted[labels, cols]))
        probs = np.exp(shifted - logsumexp)
    grad = probs
    grad[labels, cols] -= 1.0
    return loss, grad / N


def evaluate(net, X, labels, params=None, chunk=1000):
    """Mean loss and accuracy over a whole dataset (NaN for no samples)."""
    if len(labels) == 0:
        return float("nan"), float("nan")
    logits = predict(net, X, params, chunk)
    loss, _ = loss_softmax_xent(logits, labels)
    acc = float(np.mean(np.argmax(logits, axis=0) == labels))
    return loss, acc


def check_cache(net, cache, params=None):
    params = net.params if params is None else params
    if len(cache.a) != net.num_linear or len(cache.z) != net.num_linear:
        raise ConsistencyError("cache depth does not match the network")
    for layer, theta, a, z in zip(net.linear, params, cache.a, cache.z):
        if a.shape[:-1] != net.shapes[net.layers.index(layer)] or z.shape[0] != theta.shape[0]:
            raise ConsistencyError(f"cache entry for {layer!r} has drifted in shape")


def backprop_deltas(net, cache, grad_logits, params=None):
    """Derivatives of the loss with respect to every ``z[i]``."""
    params = net.params if params is None else params
    deltas = [None] * net.num_linear
    delta = grad_logits
    for i in range(net.num_linear - 1, -1, -1):
        deltas[i] = delta
        if i == 0:
            break
        layer = net.linear[i]
        g_a = layer.input_adjoint(params[i], delta, cache.a[i].shape)
        delta = chain_vjp(net.blocks[i - 1], cache.chain[i - 1], g_a)
    return deltas


def backprop_grad(net, cache, labels, params=None):
    """Gradient of the mean loss with respect to every parameter matrix."""
    params = net.params if params is None else params
    check_cache(net, cache, params)
    loss, grad_logits = loss_softmax_xent(cache.logits, labels)
    deltas = backprop_deltas(net, cache, grad_logits, params)
    grads = [layer.param_adjoint(d, a) for layer, d, a in zip(net.linear, deltas, cache.a)]
    return DirectionSet(grads, loss=loss, diverged=cache.diverged or not np.isfinite(loss))


def loss_and_grad(net, X, labels, params=None):
    cache, _ = forward(net, X, params)
    return backprop_grad(net, cache, labels, params)


def phi_param_adjoint(residual, a, layer=None):
    """``(grad phi(., a))(residual)``: the parameter gradient of
    ``<phi(theta, a), residual>``.

    Without ``layer`` a biased dense layer is assumed.
    """
    layer = layer or _dense_for(a, residual.shape[0], bias=True)
    return layer.param_adjoint(residual, a)


def phi_of_param(theta, a, layer=None):
    """``phi(theta, a)``, the adjoint of :func:`phi_param_adjoint` in ``theta``.

    Without ``layer`` a dense layer is inferred from the shapes: a parameter
    with one more column than ``a`` has rows is read as ``[W b]``.
    """
    theta = np.asarray(theta, dtype=np.float64)
    if layer is None:
        layer = infer_dense(theta, a)
    return layer.phi(theta, a)


def infer_dense(theta, a):
    if a.ndim != 2 or theta.ndim != 2:
        raise DimensionError("only dense layers can be inferred from shapes")
    if theta.shape[1] == a.shape[0] + 1:
        return Dense(a.shape[0], theta.shape[0], bias=True)
    if theta.shape[1] == a.shape[0]:
        return Dense(a.shape[0], theta.shape[0], bias=False)
    raise DimensionError(f"parameter {theta.shape} does not act on activation {a.shape}")


def _dense_for(a, n_out, bias):
    if a.ndim != 2:
        raise DimensionError("only dense layers can be inferred from shapes")
    return Dense(a.shape[0], n_out, bias=bias)
