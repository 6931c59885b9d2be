# %% [markdown]
# # Checking the improvement bound on a 3-state chain
#
# On a tabular problem every quantity in the bound can be computed exactly:
# policy values come from a linear solve, and visitation from the same system
# transposed. We train a small federation on chain-3, read off the greedy
# policies, and compare each against the empirical behavior of its data.

# %%
import numpy as np

from forler.cli import greedy_tabular_policy
from forler.config import load_config
from forler.envs import concat_datasets, make_env, value_iteration
from forler.federation import build_datasets, run_federation
from forler.verify import (TabularPolicy, bound_grid, check_theorem1, empirical_behavior, exact_policy_value,
                           visitation_distribution)

cfg = load_config("configs/chain3_verify.json")
mdp = make_env(cfg.env_id).mdp
V_opt, pi_opt = value_iteration(mdp)
print("optimal actions:", pi_opt, " optimal V:", np.round(V_opt, 3))

# %% [markdown]
# Sanity cells first. A policy compared with itself has lhs = 0 and a
# non-positive right-hand side, so the bound must hold.

# %%
pi = TabularPolicy.deterministic(pi_opt, mdp.n_actions)
print(check_theorem1(mdp, pi, pi).to_text())

# %% [markdown]
# Now the learned global policy against the pooled behavior.

# %%
devices, server = build_datasets(cfg)
result = run_federation(cfg, 0, devices, server)
pi_g = greedy_tabular_policy(result.global_actor, mdp.n_states, mdp.n_actions)
beta = empirical_behavior(concat_datasets(devices), mdp.n_states, mdp.n_actions)
print("learned actions:", pi_g.greedy_actions())
print("J(learned) =", round(exact_policy_value(mdp, pi_g)[1], 4), " J(behavior) =",
      round(exact_policy_value(mdp, beta)[1], 4))
print("visitation under learned policy:", np.round(visitation_distribution(mdp, pi_g), 4))

# %%
for rep in bound_grid(mdp, pi_g, beta, alphas=(0.1, 1.0), etas=(0.1, 0.5)):
    print(f"alpha={rep.alpha:<4} eta={rep.eta:<4} lhs={rep.lhs:8.4f} rhs={rep.rhs:8.4f} holds={rep.holds}")
