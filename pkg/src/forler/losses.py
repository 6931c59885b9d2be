"""Critic and actor objectives with analytic parameter gradients.

Continuous environments use critics ``(state ++ action) -> scalar`` and
deterministic tanh actors.  Tabular environments use critics
``one_hot(state) -> Q(s, .)`` and softmax actors over action logits; there the
"action" seen by the quadratic penalties is the probability vector.

Every loss returns its value together with gradients for the parameters it
trains, so callers only need :func:`forler.approximator.optimizer_step`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .approximator import ApproximatorParams, NonFiniteError, backward, forward, forward_cache

LOG_2PI = np.log(2.0 * np.pi)


@dataclass(frozen=True, eq=False)
class CriticPair:
    q1: ApproximatorParams
    q2: ApproximatorParams
    q1_target: ApproximatorParams
    q2_target: ApproximatorParams

    def __post_init__(self):
        header = self.q1.shape_header
        if any(p.shape_header != header for p in (self.q2, self.q1_target, self.q2_target)):
            raise ValueError("all four critics must share one shape header")

    @classmethod
    def from_online(cls, q1: ApproximatorParams, q2: ApproximatorParams) -> "CriticPair":
        return cls(q1, q2, q1.copy(), q2.copy())

    @property
    def heads(self) -> tuple[ApproximatorParams, ApproximatorParams]:
        return self.q1, self.q2


@dataclass(frozen=True)
class LocalLossConfig:
    omega_c: float = 5.0
    alpha_1: float = 1.0
    alpha_2: float = 0.1
    lambda_td3bc: float = 2.5
    gamma: float = 0.99
    mu_samples: int = 10
    mu_noise: float = 0.2

    def __post_init__(self):
        for name in ("omega_c", "alpha_1", "alpha_2", "lambda_td3bc", "gamma", "mu_noise"):
            value = getattr(self, name)
            if not np.isfinite(value) or value < 0:
                raise ValueError(f"{name} must be finite and non-negative, got {value}")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        if self.mu_samples < 1:
            raise ValueError("mu_samples must be >= 1")


def is_discrete_critic(critic: ApproximatorParams, state_dim: int) -> bool:
    return critic.input_dim == state_dim


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _softmax_backward(p: np.ndarray, dp: np.ndarray) -> np.ndarray:
    return p * (dp - np.sum(p * dp, axis=-1, keepdims=True))


def _check_finite(name: str, x) -> None:
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"{name} is not finite")


def _require_rows(batch) -> int:
    n = len(batch)
    if n == 0:
        raise ValueError("empty batch")
    return n


def _action_index(actions: np.ndarray) -> np.ndarray:
    return np.asarray(actions).reshape(len(actions), -1)[:, 0].astype(np.int64)


# ---------------------------------------------------------------------------
# Critic evaluation helpers


def q_values(critic: ApproximatorParams, states: np.ndarray, actions: np.ndarray,
             discrete: bool) -> np.ndarray:
    """Q(s, a) for paired rows; ``actions`` are indices when ``discrete``."""
    if discrete:
        out = forward(critic, states)
        return out[np.arange(len(states)), _action_index(actions)]
    return forward(critic, np.concatenate([states, actions], axis=1))[:, 0]


def min_q(critics, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
    """Pointwise minimum over continuous critic heads."""
    x = np.concatenate([states, actions], axis=1)
    return np.min([forward(c, x)[:, 0] for c in critics], axis=0)


def min_q_grad_action(critics, states: np.ndarray, actions: np.ndarray, weight: np.ndarray):
    """Value and d/d action of ``sum_j weight_j * min_i Q_i(s_j, a_j)``.

    The gradient flows through the head attaining the minimum (first head on
    ties).  Also returns the per-head parameter gradients of that expression.
    """
    x = np.concatenate([states, actions], axis=1)
    outs, caches = zip(*(forward_cache(c, x) for c in critics))
    values = np.stack([o[:, 0] for o in outs])
    which = np.argmin(values, axis=0)
    d_action = np.zeros_like(actions)
    param_grads = []
    for i, (c, cache) in enumerate(zip(critics, caches)):
        up = np.where(which == i, weight, 0.0)[:, None]
        g, gx = backward(c, cache, up, need_input_grad=True)
        d_action += gx[:, states.shape[1]:]
        param_grads.append(g)
    return values[which, np.arange(len(which))], d_action, param_grads


def actor_output(actor: ApproximatorParams, states: np.ndarray, discrete: bool) -> np.ndarray:
    """Deterministic action (continuous) or action probabilities (tabular)."""
    out = forward(actor, states)
    return softmax(out) if discrete else out


# ---------------------------------------------------------------------------
# Local critic: conservative fitted-Q with a two-head target


def bellman_target(critic_pair: CriticPair, actor: ApproximatorParams, batch, gamma: float,
                   discrete: bool = False) -> np.ndarray:
    """``r + gamma * (1 - terminal) * min(Q1', Q2')(s', pi(s'))``; never differentiated."""
    _require_rows(batch)
    if critic_pair.q1_target is None or critic_pair.q2_target is None:
        raise ValueError("target critics are required")
    s2 = batch.next_states
    if discrete:
        p = actor_output(actor, s2, True)
        qmin = np.minimum(forward(critic_pair.q1_target, s2), forward(critic_pair.q2_target, s2))
        boot = np.sum(p * qmin, axis=1)
    else:
        a2 = forward(actor, s2)
        boot = min_q((critic_pair.q1_target, critic_pair.q2_target), s2, a2)
    y = batch.rewards + gamma * (1.0 - batch.terminals) * boot
    _check_finite("bellman target", y)
    return y


def sample_mu_actions(actor: ApproximatorParams, states: np.ndarray, n_samples: int, noise: float,
                      rng: np.random.Generator, low: float = -1.0, high: float = 1.0) -> np.ndarray:
    """Proposal actions for the conservative penalty, shape ``(B, n_samples, d)``.

    Half come from the actor plus clipped Gaussian noise, the rest are uniform
    over the action box.
    """
    a = forward(actor, states)
    B, d = a.shape
    n_pi = n_samples // 2
    pi_part = np.clip(a[:, None, :] + noise * rng.standard_normal((B, n_pi, d)), low, high)
    unif = rng.uniform(low, high, size=(B, n_samples - n_pi, d))
    return np.concatenate([pi_part, unif], axis=1)


def cql_critic_loss(critic_pair: CriticPair, actor: ApproximatorParams, batch, config: LocalLossConfig,
                    rng: np.random.Generator, discrete: bool = False, mu_actions=None,
                    omega=None):
    """Conservative critic loss summed over both heads.

    Per head: ``0.5 * mean (Q - y)^2 + omega_c * (mean_mu Q - mean_data Q)``.
    ``mu_actions`` overrides the proposal actions (``(B, M, d)``, or ``(B, M)``
    indices for tabular critics).  Returns ``(loss, (grad_q1, grad_q2), info)``.
    """
    B = _require_rows(batch)
    omega = config.omega_c if omega is None else omega
    y = bellman_target(critic_pair, actor, batch, config.gamma, discrete)
    s, a = batch.states, batch.actions
    total = 0.0
    grads = []
    info = {"td": 0.0, "penalty": 0.0}
    if not discrete and mu_actions is None and omega > 0:
        mu_actions = sample_mu_actions(actor, s, config.mu_samples, config.mu_noise, rng)
    for q in critic_pair.heads:
        if discrete:
            out, cache = forward_cache(q, s)
            idx = _action_index(a)
            q_data = out[np.arange(B), idx]
            up = np.zeros_like(out)
            err = q_data - y
            up[np.arange(B), idx] += err / B - omega / B
            if mu_actions is None:
                q_mu = out.mean(axis=1)
                up += omega / (B * out.shape[1])
            else:
                mu_idx = np.asarray(mu_actions, dtype=np.int64).reshape(B, -1)
                M = mu_idx.shape[1]
                q_mu = out[np.arange(B)[:, None], mu_idx].mean(axis=1)
                np.add.at(up, (np.repeat(np.arange(B), M), mu_idx.ravel()), omega / (B * M))
            g, _ = backward(q, cache, up)
        else:
            x = np.concatenate([s, a], axis=1)
            out, cache = forward_cache(q, x)
            q_data = out[:, 0]
            err = q_data - y
            g, _ = backward(q, cache, (err / B - omega / B)[:, None])
            if omega > 0:
                M = mu_actions.shape[1]
                xm = np.concatenate([np.repeat(s, M, axis=0), mu_actions.reshape(B * M, -1)], axis=1)
                out_mu, cache_mu = forward_cache(q, xm)
                q_mu = out_mu[:, 0].reshape(B, M).mean(axis=1)
                g_mu, _ = backward(q, cache_mu, np.full((B * M, 1), omega / (B * M)))
                g = g + g_mu
            else:
                q_mu = q_data
        td = 0.5 * np.mean(err ** 2)
        pen = omega * (np.mean(q_mu) - np.mean(q_data))
        total += td + pen
        info["td"] += td
        info["penalty"] += pen
        grads.append(g)
    _check_finite("critic loss", total)
    return float(total), tuple(grads), info


# ---------------------------------------------------------------------------
# Local actor objectives


def rectified_actor_loss(actor: ApproximatorParams, critic_pair: CriticPair, batch,
                         rectified_actions: np.ndarray, global_actor: ApproximatorParams,
                         config: LocalLossConfig, discrete: bool = False):
    """``-mean Qmin(s, pi(s)) + a1 * mean|pi(s) - rect|^2 + a2 * mean|pi(s) - pi0(s)|^2``.

    For tabular actors ``pi(s)`` is the probability vector and
    ``rectified_actions`` holds either action indices or probability rows.
    Returns ``(loss, actor_grad)``.
    """
    B = _require_rows(batch)
    rect = np.asarray(rectified_actions, dtype=np.float64)
    if rect.shape[0] != B:
        raise ValueError(f"rectified actions have {rect.shape[0]} rows, batch has {B}")
    s = batch.states
    a1, a2 = config.alpha_1, config.alpha_2
    out, cache = forward_cache(actor, s)
    if discrete:
        p = softmax(out)
        if rect.ndim == 1 or rect.shape[1] != p.shape[1]:
            rect = np.eye(p.shape[1])[rect.reshape(B, -1)[:, 0].astype(np.int64)]
        anchor = actor_output(global_actor, s, True)
        qmin = np.minimum(forward(critic_pair.q1, s), forward(critic_pair.q2, s))
        q_pi = np.sum(p * qmin, axis=1)
        dp = (-qmin + 2 * a1 * (p - rect) + 2 * a2 * (p - anchor)) / B
        up = _softmax_backward(p, dp)
        act = p
    else:
        act = out
        anchor = forward(global_actor, s)
        q_pi, dq_da, _ = min_q_grad_action(critic_pair.heads, s, act, np.ones(B))
        up = (-dq_da + 2 * a1 * (act - rect) + 2 * a2 * (act - anchor)) / B
    loss = (-np.mean(q_pi) + a1 * np.mean(np.sum((act - rect) ** 2, axis=1))
            + a2 * np.mean(np.sum((act - anchor) ** 2, axis=1)))
    _check_finite("actor loss", loss)
    g, _ = backward(actor, cache, up)
    return float(loss), g


def td3bc_actor_loss(actor: ApproximatorParams, critic_pair: CriticPair, batch, alpha_bc: float = 2.5,
                     normalize: bool = True, discrete: bool = False):
    """``-lam * mean Q1(s, pi(s)) + mean |pi(s) - a|^2`` with ``lam = alpha_bc / mean|Q1|``.

    The normaliser is treated as a constant.  Returns ``(loss, actor_grad, lam)``.
    """
    if discrete:
        raise ValueError("TD3+BC is a continuous-control baseline; tabular envs are not supported")
    B = _require_rows(batch)
    s, a = batch.states, batch.actions
    out, cache = forward_cache(actor, s)
    x = np.concatenate([s, out], axis=1)
    q_out, q_cache = forward_cache(critic_pair.q1, x)
    q = q_out[:, 0]
    lam = alpha_bc / max(np.mean(np.abs(q)), 1e-8) if normalize else alpha_bc
    _, gx = backward(critic_pair.q1, q_cache, np.ones((B, 1)), need_input_grad=True)
    dq_da = gx[:, s.shape[1]:]
    up = (-lam * dq_da + 2 * (out - a)) / B
    loss = -lam * np.mean(q) + np.mean(np.sum((out - a) ** 2, axis=1))
    _check_finite("td3bc loss", loss)
    g, _ = backward(actor, cache, up)
    return float(loss), g, float(lam)


# ---------------------------------------------------------------------------
# Server objectives: pessimistic Q-ensemble and its surrogate


def gaussian_log_prob(noise: np.ndarray, log_std: np.ndarray) -> np.ndarray:
    """Log density of ``mean + exp(log_std) * noise`` under N(mean, exp(log_std)^2)."""
    return np.sum(-log_std - 0.5 * noise ** 2 - 0.5 * LOG_2PI, axis=-1)


def server_policy_sample(actor: ApproximatorParams, log_std, states: np.ndarray, beta_ent: float,
                         rng: np.random.Generator | None, stochastic: bool):
    """Actions of the server policy and their log-probabilities.

    Deterministic mode (default) returns the actor mean and zero log-probs.
    Stochastic mode samples ``clip(mean + std * eps)``; the log-density is that
    of the unclipped Gaussian sample.
    """
    mean = forward(actor, states)
    if not stochastic:
        return mean, np.zeros(len(states)), None
    eps = rng.standard_normal(mean.shape)
    raw = mean + np.exp(log_std) * eps
    return np.clip(raw, -1.0, 1.0), gaussian_log_prob(eps, log_std), eps


def ensemble_target(target_heads, actor: ApproximatorParams, log_std, batch, gamma: float,
                    beta_ent: float = 0.0, rng=None, stochastic: bool = False,
                    discrete: bool = False) -> np.ndarray:
    """``r + gamma * (1 - terminal) * E_a'[min_i Q_i(s', a') - beta * log pi(a'|s')]``."""
    _require_rows(batch)
    if len(target_heads) == 0:
        raise ValueError("ensemble is empty")
    s2 = batch.next_states
    if discrete:
        logits = forward(actor, s2)
        p, logp = softmax(logits), log_softmax(logits)
        qmin = np.min([forward(h, s2) for h in target_heads], axis=0)
        boot = np.sum(p * (qmin - beta_ent * logp), axis=1)
    else:
        a2, logp, _ = server_policy_sample(actor, log_std, s2, beta_ent, rng, stochastic)
        boot = min_q(target_heads, s2, a2) - beta_ent * logp
    y = batch.rewards + gamma * (1.0 - batch.terminals) * boot
    _check_finite("ensemble target", y)
    return y


def ensemble_critic_loss(heads, targets_y: np.ndarray, batch, policy_actions, omega_s: float,
                         discrete: bool = False):
    """Per-head ``mean (Q_i - y)^2 + omega_s * (mean Q_i(s, a_pi) - mean Q_i(s, a))``.

    ``policy_actions`` are server-policy actions at ``batch.states`` (action
    rows) or, for tabular critics, the policy probability rows.
    Returns ``(total_loss, [grad_i])``.
    """
    B = _require_rows(batch)
    s, a = batch.states, batch.actions
    total, grads = 0.0, []
    for h in heads:
        if discrete:
            out, cache = forward_cache(h, s)
            idx = _action_index(a)
            q_data = out[np.arange(B), idx]
            err = q_data - targets_y
            up = omega_s * policy_actions / B
            up[np.arange(B), idx] += 2 * err / B - omega_s / B
            q_pi = np.sum(policy_actions * out, axis=1)
            g, _ = backward(h, cache, up)
        else:
            x = np.concatenate([np.concatenate([s, a], axis=1),
                                np.concatenate([s, policy_actions], axis=1)])
            out, cache = forward_cache(h, x)
            q_data, q_pi = out[:B, 0], out[B:, 0]
            err = q_data - targets_y
            up = np.concatenate([2 * err / B - omega_s / B, np.full(B, omega_s / B)])[:, None]
            g, _ = backward(h, cache, up)
        total += np.mean(err ** 2) + omega_s * (np.mean(q_pi) - np.mean(q_data))
        grads.append(g)
    _check_finite("ensemble critic loss", total)
    return float(total), grads


def server_actor_loss(actor: ApproximatorParams, log_std, heads, batch, beta_ent: float = 0.0,
                      rng=None, stochastic: bool = False, discrete: bool = False, noise=None):
    """``-mean[min_i Q_i(s, a) - beta * log pi(a|s)]`` with reparameterised samples.

    Returns ``(loss, actor_grad, log_std_grad)``; ``log_std_grad`` is ``None``
    unless the continuous policy is stochastic.  ``noise`` fixes the standard
    normal draws (used for gradient checks).
    """
    B = _require_rows(batch)
    s = batch.states
    out, cache = forward_cache(actor, s)
    if discrete:
        p, logp = softmax(out), log_softmax(out)
        qmin = np.min([forward(h, s) for h in heads], axis=0)
        obj = np.sum(p * (qmin - beta_ent * logp), axis=1)
        dp = -(qmin - beta_ent * logp - beta_ent) / B
        g, _ = backward(actor, cache, _softmax_backward(p, dp))
        loss = -np.mean(obj)
        _check_finite("server actor loss", loss)
        return float(loss), g, None
    if not stochastic:
        qmin, dq_da, _ = min_q_grad_action(heads, s, out, np.ones(B))
        g, _ = backward(actor, cache, -dq_da / B)
        loss = -np.mean(qmin)
        _check_finite("server actor loss", loss)
        return float(loss), g, None
    eps = rng.standard_normal(out.shape) if noise is None else np.asarray(noise)
    std = np.exp(log_std)
    raw = out + std * eps
    a = np.clip(raw, -1.0, 1.0)
    inside = (np.abs(raw) < 1.0).astype(np.float64)
    qmin, dq_da, _ = min_q_grad_action(heads, s, a, np.ones(B))
    logp = gaussian_log_prob(eps, log_std)
    loss = -np.mean(qmin - beta_ent * logp)
    d_raw = -dq_da * inside / B
    g, _ = backward(actor, cache, d_raw)
    g_log_std = np.sum(d_raw * std * eps, axis=0) - beta_ent * np.ones_like(log_std)
    _check_finite("server actor loss", loss)
    return float(loss), g, g_log_std
