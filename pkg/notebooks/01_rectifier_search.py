# %% [markdown]
# # Searching a critic for better actions
#
# The rectifier never looks at gradients. It samples actions around the
# actor's output, scores them with the smaller critic head, and refits an
# isotropic Gaussian with softmax weights. Here the critic is a hand-built
# bump whose peak sits at a = 0.7, so we know where the search should land.

# %%
import numpy as np

from forler.approximator import ApproximatorParams, LayerSpec, forward
from forler.losses import CriticPair
from forler.rectifier import RectifiedCache, RectifierConfig, full_search, periodic_rectify


def bump_critic(centre, width=0.2, k=8.0):
    # tanh(k(a - c + w)) - tanh(k(a - c - w)) peaks exactly at a = c
    W1 = np.array([[0.0, k], [0.0, k]])
    b1 = np.array([k * (width - centre), -k * (width + centre)])
    p = ApproximatorParams((LayerSpec(2, 2, "tanh"), LayerSpec(2, 1, "identity")),
                           np.r_[W1.ravel(), b1, 1.0, -1.0, 0.0])
    return CriticPair.from_online(p, p)


critic = bump_critic(0.7)
actor = ApproximatorParams((LayerSpec(1, 1, "tanh"),), np.array([0.0, -0.5]))  # always outputs tanh(-0.5)
states = np.zeros((4, 1))
print("actor action:", forward(actor, states)[:, 0])

# %% [markdown]
# Accuracy against cost as the iteration count grows, with 32 candidates per iteration.

# %%
rng = np.random.default_rng(0)
for iters in (1, 2, 5, 10):
    out, used = full_search(critic, states, actor, RectifierConfig(population=32, iterations=iters), rng)
    print(f"I={iters:>2}  mean |a - 0.7| = {np.abs(out - 0.7).mean():.4f}  critic evals = {used}")

# %% [markdown]
# ## The periodic cache
#
# A full search costs I*N + 1 critic calls per state. Between refreshes the
# cached action only has to beat the actor's current action, which costs 2.

# %%
for delta in (1, 5, 20):
    cache = RectifiedCache()
    cfg = RectifierConfig(delta=delta)
    for tau in range(100):
        periodic_rectify(cache, tau, critic, states, actor, cfg, rng)
    print(f"delta={delta:>2}  full searches={cache.n_full_searches:>3}  total evals={cache.q_eval_count}")
