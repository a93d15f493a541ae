"""
Valuing unlabeled clients by leaving them out
=============================================

Re-run the federation once per unlabeled client with that client removed and
record how much the test error changes.
"""

# %%
import tempfile
from dataclasses import replace
from pathlib import Path

from fedsemi.orchestrator import leave_one_out, load_config

cfg = replace(load_config(Path(__file__).resolve().parent.parent / "configs" / "smoke.json"), rounds=10)
with tempfile.TemporaryDirectory() as out:
    rows = leave_one_out(cfg, out)
    print((Path(out) / "loo.csv").read_text())

for r in rows[1:]:
    print(f"client {r.client_id}: {r.data_size} samples, error change {r.delta_error:+.4f}")
