"""
Class-adaptive pseudo-labeling
==============================

Each client keeps per-class learning-effect counts. A class's threshold is the
base threshold scaled by how well that class is learned relative to the best
class, so rare classes get a lower bar.
"""

# %%
import numpy as np

from fedsemi import tensor_net as tn
from fedsemi.data_sim import ClientDataset, gen_gaussian_mixture
from fedsemi.local_train import LocalTrainConfig, ThresholdState, assign_pseudo_labels, train_local_round

state = ThresholdState(base_tau=0.95, sigma=np.array([40, 10, 0]), unused_count=20)
print("betas", state.betas(), "thresholds", state.class_thresholds())

# %% [markdown]
# Train a model on a partially labeled client and watch the confident set
# grow while the thresholds adapt.

# %%
d = gen_gaussian_mixture(3, 4, [150, 100, 50], 0.3, seed=2)
rng = np.random.default_rng(0)
order = rng.permutation(len(d))
lab, unl = order[:30], order[30:]
client = ClientDataset.build(0, d.X[lab], d.y[lab], d.X[unl], d.y[unl], feature_dim=4)

params = tn.init_params(tn.Architecture((4, 16, 3)), 0)
state = ThresholdState.fresh(3)
cfg = LocalTrainConfig(epochs=3, batch_size=16, lr_labeled=0.1)
for r in range(6):
    res = train_local_round(client, params, cfg, state, np.random.default_rng([0, r]))
    params, state = res.params, res.state
    a = assign_pseudo_labels(params, client.X_unlabeled, state)
    print(f"round {r}: confident {a.confident.sum():3d}/{client.n_unlabeled}  "
          f"thresholds {np.round(state.class_thresholds(), 3)}")
