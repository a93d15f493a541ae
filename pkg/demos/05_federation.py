"""
End-to-end federation on the smoke configuration
================================================

Warm-up on the labeled client, then semi-supervised rounds with each strategy.
"""

# %%
from dataclasses import replace
from pathlib import Path

from fedsemi.orchestrator import load_config, run_federation

cfg = load_config(Path(__file__).resolve().parent.parent / "configs" / "smoke.json")
for strategy in ("fedavg", "fedavg_semi", "semianagg"):
    state = run_federation(replace(cfg, strategy=strategy))
    m = state.metrics[-1]
    print(f"{strategy:12s} round {m.round}: acc {m.acc:.3f}  b_acc {m.b_acc:.3f}  auc {m.auc:.3f}")

# %% [markdown]
# The per-round weight log shows how SemiAnAgg's coefficients move.

# %%
state = run_federation(cfg)
for rec in state.records[cfg.warmup_rounds::5]:
    print(rec["round"], {k: round(v, 3) for k, v in rec["coefficients"].items()})
