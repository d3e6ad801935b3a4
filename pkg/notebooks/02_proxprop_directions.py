"""
ProxProp directions versus the gradient
=======================================

Hidden layers take a proximal step instead of an explicit one. The resulting
direction is the gradient preconditioned by M = I/tau_theta + A A^T, so it
always has a positive inner product with the gradient.
"""

# %%
import numpy as np

from proxprop.network import forward, loss_and_grad
from proxprop.prox import OperatorM, ProxConfig, proxprop_directions
from proxprop.verify import descent_report, random_net, spectral_bounds

net, X, y, _ = random_net(3, max_layers=4)
print(net)
grads = loss_and_grad(net, X, y)

# %%
for config in [ProxConfig.cg(k) for k in (1, 3, 10)] + [ProxConfig.exact(0.5)]:
    dirs = proxprop_directions(net, X, y, config)
    bounds = spectral_bounds(net, X, config.tau_theta) if config.mode == "exact" else None
    for line in descent_report(dirs, grads, bounds).to_records(oracle=config.name):
        print(line)

# %%
# applying M to the exact direction gives the gradient back
dirs = proxprop_directions(net, X, y, ProxConfig.exact(0.5))
cache, _ = forward(net, X)
for i in range(net.num_linear - 1):
    Mg = OperatorM(net.linear[i], cache.a[i], 0.5)(dirs[i])
    print(i, np.linalg.norm(Mg - grads[i]) / np.linalg.norm(grads[i]))

# %%
# small tau_theta shrinks the implicit directions toward tau_theta * grad
for tau_theta in (1e-1, 1e-3, 1e-6):
    d = proxprop_directions(net, X, y, ProxConfig.exact(tau_theta))
    print(tau_theta, [f"{np.linalg.norm(a) / np.linalg.norm(g):.2e}" for a, g in zip(d, grads)])
