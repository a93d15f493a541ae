"""
How the three server strategies weigh clients
=============================================

FedAvg weighs by data size. FedAvg-Semi splits mass between labeled clients
(by labeled count) and unlabeled clients (by confident pseudo-label count).
SemiAnAgg replaces the unlabeled counts with per-class diversity scores: how
far each client's global-model features have moved from a fixed random anchor.
"""

# %%
from fedsemi.aggregate import SimilarityReport, semianagg_weights

reports = [
    SimilarityReport(0, [None, None, None], [0, 0, 0], n_labeled=100),
    SimilarityReport(1, [0.40, 0.35, None], [300, 250, 0], n_labeled=0),   # large, two classes
    SimilarityReport(2, [0.42, 0.30, None], [280, 260, 0], n_labeled=0),   # large, two classes
    SimilarityReport(3, [None, None, 0.55], [0, 0, 40], n_labeled=0),      # small, owns class 2
]
w = semianagg_weights(reports, lambda_hat_1=0.5)
n_conf = [r.n_confident for r in reports]
for k, cid in enumerate(w.client_ids):
    share = n_conf[k] / sum(n_conf)
    print(f"client {cid}: confident share {share:.3f}  diversity weight {w.unsup_weights[k]:.3f}  "
          f"final coefficient {w.coefficients[k]:.3f}")

# %% [markdown]
# Client 3 has the least data but is the only one covering class 2, so its
# per-class normalized score for that class is 1 and its weight far exceeds
# its share of confident samples.
