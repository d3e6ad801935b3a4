"""
Step-size stability on a small problem
======================================

A miniature version of the step-size table: the same network is trained with
each oracle over a grid of learning rates and the final full-batch loss is
reported, or DIVERGED. Set PROXPROP_DATA_DIR and switch the base config to
cifar10 for the real thing (it takes a while).
"""

# %%
from proxprop.cli import stability_sweep
from proxprop.optim import TrainConfig

base = TrainConfig(dataset="blobs", n_samples=300, n_classes=4, noise=0.8,
                   architecture="2-32-32-4", activation="relu", optimizer="nesterov",
                   momentum=0.95, batch_size=30, epochs=10, tau_theta=1.0)
taus = [50.0, 10.0, 1.0, 0.1, 0.01]

# %%
table = stability_sweep(base, taus, ["backprop", "proxprop_cg3", "proxprop_exact"])
print(table.to_csv())

# %%
# a finite loss is not the same as a stable run: with relu units a blown-up
# network can keep a finite (but huge) loss, so also compare with epoch 0
for oracle in table.oracles:
    finite = [t for t in taus if table.value(oracle, t) is not None]
    improved = [t for t in finite
                if table.value(oracle, t) < table.cells[(oracle, t)].initial_loss]
    print(f"{oracle:15s} finite for tau in {finite}, improved for tau in {improved}")
