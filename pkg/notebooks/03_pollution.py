# %% [markdown]
# # Policy pollution on the point mass
#
# Four devices hold decent data and two hold uniformly random actions. The
# FedAvg baselines average every device's actor, random ones included. FORLER
# only ships critics upward and lets the server pick the pessimistic value.
#
# The full comparison (30 rounds, 3 seeds) takes several minutes per seed on one
# core. Set ROUNDS to something small for a quick look.

# %%
import os

import numpy as np

from forler.config import load_config
from forler.federation import build_datasets, run_federation

ROUNDS = int(os.environ.get("ROUNDS", 5))
cfg = load_config("configs/pollution.json").replace(rounds=ROUNDS)
devices, server = build_datasets(cfg)
for ds in devices:
    print(f"{ds.quality:>14}  mean episode return {ds.episode_returns().mean():8.1f}")

# %%
curves, runs = {}, {}
for algo in ("forler", "fed_cql", "fed_td3bc"):
    runs[algo] = run_federation(cfg.replace(algorithm=algo), 0, devices, server)
    curves[algo] = [r["global_return"] for r in runs[algo].rows if r["device_id"] == "device-0"]
    print(f"{algo:>10}: " + " ".join(f"{g:7.1f}" for g in curves[algo]))

# %% [markdown]
# FORLER's global policy usually gets worse over the first rounds. The heads
# from the random devices are the most pessimistic ones, and the server actor
# follows the minimum. Around round 20 the server's own fitting wins out and
# the return climbs back. Short runs only show the dip.
#
# Per-device returns at the last round:

# %%
last = [r for r in runs["forler"].rows if r["round"] == ROUNDS]
for r, ds in zip(last, devices):
    print(f"{r['device_id']} ({ds.quality}): {r['device_return']:.1f}")
print("global:", np.round(last[0]["global_return"], 1))
