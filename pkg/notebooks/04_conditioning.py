"""
Conditioning of the data Gram matrix
====================================

The first layer's least-squares subproblem has Hessian X X^T. Power
iteration gives its top eigenvalue without forming it; the bottom one comes
from a dense eigendecomposition. Natural images are badly conditioned, which
is what limits explicit steps on the first layer.
"""

# %%
import numpy as np

from proxprop.data import load_cifar10
from proxprop.verify import gram_conditioning

rng = np.random.default_rng(0)

# %%
# isotropic data is well conditioned
print(gram_conditioning(rng.standard_normal((50, 2000))).to_records(data="gaussian"))

# %%
# strongly correlated features are not
basis = rng.standard_normal((50, 50))
scales = np.logspace(0, -3, 50)
X = basis @ (scales[:, None] * rng.standard_normal((50, 2000)))
print(gram_conditioning(X).to_records(data="correlated"))

# %%
try:
    X, _ = load_cifar10(subset_size=5000)
except FileNotFoundError as exc:
    print("skipping CIFAR-10:", exc)
else:
    print(gram_conditioning(X).to_records(data="cifar10"))
