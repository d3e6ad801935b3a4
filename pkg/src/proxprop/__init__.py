"""Proximal backpropagation and classical backpropagation as interchangeable
first-order oracles for small feed-forward networks."""

__version__ = "0.1.0"

from .exceptions import (ConfigError, ConsistencyError, DimensionError, FactorizationError,
                         FormatError, NumericalBreakdown)
from .linalg import (LinearOperator, cg_solve, direct_spd_solve, gemm,
                     inverse_power_iteration, power_iteration)
from .network import (Conv2d, Dense, DirectionSet, Flatten, ForwardCache, MaxPool2d, Network,
                      ReLU, Tanh, backprop_grad, evaluate, forward, loss_and_grad,
                      loss_softmax_xent,
                      phi_of_param, phi_param_adjoint)
from .penalty import PenaltyParams, penalty_backprop_step, penalty_energy
from .prox import (OperatorM, ProxConfig, apply_M, backward_sweep, prox_step_cg,
                   prox_step_exact, proxprop_directions)
from .optim import (Dataset, OptimizerState, RunLog, TrainConfig, adam_apply, nesterov_apply,
                    sgd_apply, split_dataset, train)
