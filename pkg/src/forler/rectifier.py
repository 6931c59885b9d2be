"""Zeroth-order search for high-value actions with a periodic cache.

Every ``delta`` local steps a full Gaussian search runs for each state of the
minibatch: ``iterations`` rounds of sampling ``population`` candidates, scoring
them with the smaller of the two critic heads, and refitting the isotropic
Gaussian with softmax weights.  The best scored action (the current actor's
action included) becomes the rectified action.  On the steps in between, the
cached action only competes against the actor's current action.

Critic evaluations are counted exactly: ``I*N + 1`` per state for a full
search, 2 per state for a cache comparison.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .approximator import forward
from .losses import CriticPair, min_q


@dataclass(frozen=True)
class RectifierConfig:
    population: int = 32
    iterations: int = 5
    beta_w: float = 10.0
    delta: int = 5
    init_std: float = 0.5
    min_std: float = 1e-3
    action_low: float = -1.0
    action_high: float = 1.0

    def __post_init__(self):
        if self.population < 1 or self.iterations < 1:
            raise ValueError("population and iterations must be >= 1")
        if self.delta < 1:
            raise ValueError("delta must be >= 1")
        if not self.beta_w > 0 or not self.init_std > 0:
            raise ValueError("beta_w and init_std must be positive")


@dataclass(frozen=True, eq=False)
class SearchDistribution:
    mean: np.ndarray
    std: float

    def __post_init__(self):
        if self.std < 0:
            raise ValueError("std must be non-negative")
        if not np.all(np.isfinite(self.mean)):
            raise ValueError("mean must be finite")


@dataclass
class RectifiedCache:
    actions: np.ndarray | None = None
    last_full_search_step: int = 0
    q_eval_count: int = 0
    full_search_evals: int = 0
    n_full_searches: int = 0


def softmax_weights(q_values, beta_w: float) -> np.ndarray:
    """``exp(beta * q) / sum exp(beta * q)`` along the last axis, max-shifted."""
    q = np.asarray(q_values, dtype=np.float64)
    if q.size == 0 or q.shape[-1] == 0:
        raise ValueError("softmax_weights needs at least one value")
    if not np.all(np.isfinite(q)):
        raise ValueError("q_values must be finite")
    z = beta_w * (q - q.max(axis=-1, keepdims=True))
    w = np.exp(z)
    return w / w.sum(axis=-1, keepdims=True)


def distribution_update(candidates, weights) -> SearchDistribution:
    """Weighted mean of the candidates and the root weighted mean squared distance to it."""
    cand = np.asarray(candidates, dtype=np.float64)
    if cand.ndim == 1:
        cand = cand[:, None]
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 1 or w.shape[0] != cand.shape[0]:
        raise ValueError(f"{cand.shape[0]} candidates but {w.shape} weights")
    mean = w @ cand
    std = float(np.sqrt(w @ np.sum((cand - mean) ** 2, axis=1)))
    return SearchDistribution(mean, std)


def _batched_update(cand: np.ndarray, w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # cand (B, N, d), w (B, N); same arithmetic as distribution_update, row by row
    mean = np.einsum("bn,bnd->bd", w, cand)
    var = np.einsum("bn,bn->b", w, np.sum((cand - mean[:, None, :]) ** 2, axis=2))
    return mean, np.sqrt(var)


def _score(critic_pair: CriticPair, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
    return min_q(critic_pair.heads, states, actions)


def full_search(critic_pair: CriticPair, states: np.ndarray, actor, config: RectifierConfig,
                rng: np.random.Generator, actor_actions: np.ndarray | None = None):
    """Run the Gaussian search for every state; returns ``(actions, q_evals_used)``.

    Ties go to the actor's own action, then to the earliest sampled candidate.
    """
    states = np.asarray(states, dtype=np.float64)
    B = states.shape[0]
    N, I = config.population, config.iterations
    a_pi = forward(actor, states) if actor_actions is None else np.asarray(actor_actions, dtype=np.float64)
    if a_pi.shape[0] != B:
        raise ValueError("actor actions and states disagree on batch size")
    d = a_pi.shape[1]
    q_pi = _score(critic_pair, states, a_pi)
    mean = a_pi.copy()
    std = np.full(B, config.init_std)
    best_q = np.full(B, -np.inf)
    best_a = np.zeros_like(a_pi)
    s_rep = np.repeat(states, N, axis=0)
    for _ in range(I):
        cand = mean[:, None, :] + std[:, None, None] * rng.standard_normal((B, N, d))
        cand = np.clip(cand, config.action_low, config.action_high)
        q = _score(critic_pair, s_rep, cand.reshape(B * N, d)).reshape(B, N)
        j = np.argmax(q, axis=1)
        q_j = q[np.arange(B), j]
        better = q_j > best_q
        best_q = np.where(better, q_j, best_q)
        best_a[better] = cand[better, j[better]]
        mean, std = _batched_update(cand, softmax_weights(q, config.beta_w))
        std = np.maximum(std, config.min_std)
    use_search = best_q > q_pi
    out = np.where(use_search[:, None], best_a, a_pi)
    return out, B * (I * N + 1)


def periodic_rectify(cache: RectifiedCache, tau: int, critic_pair: CriticPair, states: np.ndarray,
                     actor, config: RectifierConfig, rng: np.random.Generator) -> np.ndarray:
    """Full search when ``tau % delta == 0``, otherwise cached-vs-actor comparison.

    Mutates ``cache`` (the device owns it) and returns the rectified actions.
    """
    states = np.asarray(states, dtype=np.float64)
    B = states.shape[0]
    if tau % config.delta == 0:
        actions, used = full_search(critic_pair, states, actor, config, rng)
        cache.actions = actions
        cache.last_full_search_step = tau
        cache.q_eval_count += used
        cache.full_search_evals += used
        cache.n_full_searches += 1
        return actions.copy()
    if cache.actions is None or cache.actions.shape[0] != B:
        raise ValueError(f"rectified cache holds {0 if cache.actions is None else cache.actions.shape[0]} "
                         f"rows but the minibatch has {B}; refresh the cache when the minibatch changes")
    a_pi = forward(actor, states)
    q_cached = _score(critic_pair, states, cache.actions)
    q_pi = _score(critic_pair, states, a_pi)
    cache.q_eval_count += 2 * B
    out = np.where((q_cached > q_pi)[:, None], cache.actions, a_pi)
    cache.actions = out
    return out.copy()


def greedy_tabular_actions(critic_pair: CriticPair, states: np.ndarray) -> np.ndarray:
    """Exhaustive argmax of the min-head Q for tabular critics (no search needed)."""
    qmin = np.minimum(forward(critic_pair.q1, states), forward(critic_pair.q2, states))
    return np.argmax(qmin, axis=1)
