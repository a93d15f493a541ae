"""
A small MLP in plain numpy
==========================

The classifier is a ReLU network split into an encoder (everything up to the
penultimate layer) and a linear head. Parameters are immutable; every update
returns a new object.
"""

# %%
import numpy as np

from fedsemi import tensor_net as tn

arch = tn.Architecture((4, 16, 16, 3))
params = tn.init_params(arch, seed=0)
print(arch, "->", arch.n_params, "parameters, feature dim", arch.feature_dim)

# %% [markdown]
# Forward pass: features come out of the encoder, logits out of the head.

# %%
rng = np.random.default_rng(1)
x = rng.normal(size=(5, 4))
feats, logits = tn.forward(params, x)
print("features", feats.shape, "logits", logits.shape)
print("softmax rows sum to", tn.softmax(logits).sum(axis=1))

# %% [markdown]
# Check the analytic gradient against central differences on a few
# coordinates. Relative errors around 1e-9 are typical in float64.

# %%
y = rng.integers(0, 3, 5)
loss, grad = tn.loss_and_grad(params, x, y)
v, g = tn.flatten(params), tn.flatten(grad)
for j in rng.choice(arch.n_params, 5, replace=False):
    e = np.zeros_like(v)
    e[j] = 1e-6
    fd = (tn.loss_and_grad(tn.unflatten(arch, v + e), x, y)[0]
          - tn.loss_and_grad(tn.unflatten(arch, v - e), x, y)[0]) / 2e-6
    print(f"param {j:3d}: analytic {g[j]: .6e}  numeric {fd: .6e}")

# %% [markdown]
# A few SGD steps on one batch drive the loss down.

# %%
p = params
for step in range(50):
    loss, grad = tn.loss_and_grad(p, x, y)
    p = tn.sgd_step(p, grad, lr=0.1, weight_decay=5e-4)
    if step % 10 == 0:
        print(f"step {step:2d}  loss {loss:.4f}")
