"""Outer optimizers and the minibatch training loop.

Optimizers consume a :class:`~proxprop.network.DirectionSet` as if it were a
gradient, so backprop and ProxProp plug into the same loop.
"""
import time
from dataclasses import asdict, dataclass, field
from typing import List, Optional

import numpy as np

from . import __version__
from .exceptions import ConfigError, DimensionError
from .network import evaluate, loss_and_grad
from .prox import ProxConfig, proxprop_directions


@dataclass
class OptimizerState:
    kind: str = "sgd"
    learning_rate: float = 0.1
    mu: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    buffers: dict = field(default_factory=dict)
    t: int = 0

    def __post_init__(self):
        if self.kind not in ("sgd", "nesterov", "adam"):
            raise ConfigError(f"unknown optimizer {self.kind!r}")
        if self.learning_rate <= 0:
            raise ConfigError("learning rate must be positive")
        if not 0.0 <= self.mu < 1.0:
            raise ConfigError("momentum must lie in [0, 1)")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0) or self.eps <= 0:
            raise ConfigError("invalid Adam hyperparameters")


def _check(params, dirs):
    if len(params) != len(dirs):
        raise DimensionError(f"{len(params)} parameter blocks but {len(dirs)} directions")
    for p, d in zip(params, dirs):
        if p.shape != d.shape:
            raise DimensionError(f"direction shape {d.shape} != parameter shape {p.shape}")


def _buffers(state, name, params):
    if name not in state.buffers:
        state.buffers[name] = [np.zeros_like(p) for p in params]
    return state.buffers[name]


def sgd_apply(state, params, dirs):
    _check(params, dirs)
    state.t += 1
    return [p - state.learning_rate * d for p, d in zip(params, dirs)]


def nesterov_apply(state, params, dirs):
    """``m <- mu m + d``; ``theta <- theta - lr (mu m + d)``."""
    _check(params, dirs)
    state.t += 1
    momentum = _buffers(state, "momentum", params)
    out = []
    for m, p, d in zip(momentum, params, dirs):
        m *= state.mu
        m += d
        out.append(p - state.learning_rate * (state.mu * m + d))
    return out


def adam_apply(state, params, dirs):
    _check(params, dirs)
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    first = _buffers(state, "m", params)
    second = _buffers(state, "v", params)
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    out = []
    for m, v, p, d in zip(first, second, params, dirs):
        m *= b1
        m += (1.0 - b1) * d
        v *= b2
        v += (1.0 - b2) * d * d
        out.append(p - state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.eps))
    return out


_APPLY = {"sgd": sgd_apply, "nesterov": nesterov_apply, "adam": adam_apply}


def apply_update(state, params, dirs):
    return _APPLY[state.kind](state, params, list(dirs))


# ---------------------------------------------------------------------------
# training


@dataclass
class Dataset:
    X_train: np.ndarray
    y_train: np.ndarray
    X_val: np.ndarray
    y_val: np.ndarray

    @property
    def n_train(self):
        return self.X_train.shape[-1]


def split_dataset(X, y, val_fraction=0.1, val_size=None):
    """Deterministic split: the last samples form the validation set."""
    n = X.shape[-1]
    n_val = int(val_size) if val_size is not None else int(round(val_fraction * n))
    n_val = min(max(n_val, 0), n - 1)
    cut = n - n_val
    return Dataset(X[..., :cut], y[:cut], X[..., cut:], y[cut:])


@dataclass
class TrainConfig:
    """Everything that determines a run.

    ``dataset`` is one of ``cifar10``, ``csv``, ``blobs`` or ``moons``; the
    fields after it parameterize the chosen source. ``oracle`` is
    ``backprop``, ``proxprop_exact`` or ``proxprop_cg`` (with ``cg_iters``).
    """

    dataset: str = "blobs"
    data_dir: Optional[str] = None
    subset_size: int = 5000
    csv_path: Optional[str] = None
    n_samples: int = 200
    n_classes: int = 3
    noise: float = 0.1
    data_seed: int = 0
    val_fraction: float = 0.1
    val_size: Optional[int] = None
    architecture: str = "2-16-3"
    activation: str = "relu"
    oracle: str = "backprop"
    cg_iters: int = 3
    tau: float = 0.1
    tau_theta: Optional[float] = None
    optimizer: str = "sgd"
    momentum: float = 0.9
    batch_size: int = 50
    epochs: int = 10
    seed: int = 0
    out: Optional[str] = None

    def validate(self):
        if self.dataset not in ("cifar10", "csv", "blobs", "moons"):
            raise ConfigError(f"unknown dataset {self.dataset!r}")
        if self.oracle not in ("backprop", "proxprop_exact", "proxprop_cg"):
            raise ConfigError(f"unknown oracle {self.oracle!r}")
        if self.optimizer not in ("sgd", "nesterov", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        for name in ("tau", "batch_size", "cg_iters", "subset_size", "n_samples", "n_classes"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.tau_theta is not None and self.tau_theta <= 0:
            raise ConfigError("tau_theta must be positive")
        if self.epochs < 0:
            raise ConfigError("epochs must be non-negative")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.activation not in ("relu", "tanh"):
            raise ConfigError(f"unknown activation {self.activation!r}")
        return self

    def make_oracle(self):
        if self.oracle == "backprop":
            return "backprop"
        if self.oracle == "proxprop_exact":
            return ProxConfig.exact(self.tau_theta if self.tau_theta is not None else 0.05)
        return ProxConfig.cg(self.cg_iters, self.tau_theta if self.tau_theta is not None else 1.0)

    def make_optimizer(self):
        mu = self.momentum if self.optimizer == "nesterov" else 0.0
        return OptimizerState(kind=self.optimizer, learning_rate=self.tau, mu=mu)

    def to_dict(self):
        return asdict(self)


def oracle_name(oracle):
    return oracle if isinstance(oracle, str) else oracle.name


def directions(net, X, y, oracle, params=None):
    """Gradient-like directions from either oracle."""
    if isinstance(oracle, str):
        if oracle != "backprop":
            raise ConfigError(f"unknown oracle {oracle!r}")
        return loss_and_grad(net, X, y, params)
    return proxprop_directions(net, X, y, oracle, params)


@dataclass
class EpochRecord:
    epoch: int
    full_batch_train_loss: float
    val_accuracy: float
    elapsed_seconds: float
    diverged: bool = False
    train_accuracy: float = float("nan")


@dataclass
class RunLog:
    header: dict
    records: List[EpochRecord] = field(default_factory=list)

    @property
    def diverged(self):
        return bool(self.records) and self.records[-1].diverged

    @property
    def final_loss(self):
        return self.records[-1].full_batch_train_loss

    @property
    def initial_loss(self):
        return self.records[0].full_batch_train_loss

    def losses(self):
        return [r.full_batch_train_loss for r in self.records]


def _finite(params):
    return all(np.all(np.isfinite(p)) for p in params)


def train(net, dataset, config, oracle=None, optimizer=None):
    """Minibatch training; returns a :class:`RunLog`.

    The network's parameters are replaced by the trained ones. A run stops at
    the first non-finite loss or parameter and its last record is marked
    diverged.
    """
    config.validate()
    oracle = config.make_oracle() if oracle is None else oracle
    state = config.make_optimizer() if optimizer is None else optimizer
    if dataset.n_train == 0:
        raise ConfigError("empty training set")
    header = {"config": config.to_dict(), "oracle": oracle_name(oracle),
              "version": __version__, "network": repr(net)}
    log = RunLog(header)
    rng = np.random.default_rng(config.seed)
    start = time.perf_counter()

    def record(epoch, diverged=False):
        with np.errstate(all="ignore"):
            loss, train_acc = evaluate(net, dataset.X_train, dataset.y_train)
            _, val_acc = evaluate(net, dataset.X_val, dataset.y_val)
        diverged = diverged or not np.isfinite(loss) or not _finite(net.params)
        log.records.append(EpochRecord(epoch, loss, val_acc, time.perf_counter() - start,
                                       diverged, train_acc))
        return diverged

    if record(0):
        return log
    n = dataset.n_train
    for epoch in range(1, config.epochs + 1):
        perm = rng.permutation(n)
        bad = False
        for s in range(0, n, config.batch_size):
            idx = perm[s:s + config.batch_size]
            with np.errstate(all="ignore"):
                dirs = directions(net, dataset.X_train[..., idx], dataset.y_train[idx], oracle)
                if dirs.diverged:
                    bad = True
                    break
                new = apply_update(state, net.params, dirs)
            if not _finite(new):
                bad = True
                break
            net.params = new
        if record(epoch, bad):
            break
    return log
