"""
Backprop as block gradient steps on a penalty energy
====================================================

A forward pass makes every penalty term vanish, so the energy equals the
network loss. Sweeping backwards with one gradient step per block and
rho = gamma = 1/tau then lands exactly on a plain gradient step.
"""

# %%
import numpy as np

from proxprop.network import Network, forward, loss_and_grad, loss_softmax_xent
from proxprop.penalty import penalty_backprop_step, penalty_energy
from proxprop.verify import prop1_harness

rng = np.random.default_rng(0)
net = Network.mlp([4, 8, 6, 3], activation="tanh", seed=0)
X = rng.standard_normal((4, 10))
y = rng.integers(0, 3, 10)

# %%
# at a feasible point the energy is the loss, whatever rho and gamma are
cache, logits = forward(net, X)
E = penalty_energy(net, net.params, cache.a, cache.z[:-1], y, rho=5.0, gamma=2.0)
print("energy", E, "loss", loss_softmax_xent(logits, y)[0])

# %%
tau = 0.3
grads = loss_and_grad(net, X, y)
stepped = penalty_backprop_step(net, X, y, tau)
for i, (p, g, q) in enumerate(zip(net.params, grads, stepped)):
    print(f"layer {i}: |penalty - gd| = {np.abs(q - (p - tau * g)).max():.2e}")

# %%
# the same check over many random networks, and a mismatched rho for contrast
print(prop1_harness(range(50)).to_records()[-1])
print(prop1_harness(range(5), rho_scale=2.0).to_records()[-1])
