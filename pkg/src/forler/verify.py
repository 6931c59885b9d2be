"""Exact tabular oracles and the safe-policy-improvement bound checker.

The bound compares a learned deterministic policy ``pi*`` with the behavior
policy ``beta`` that generated the data::

    J(pi*) - J(beta) >= alpha/(1-gamma) * E_{d^pi*}[D(s)]
                        + eta/(1-eta) * E_{d^pi*}[(pi*(s) - beta(s))^2]
                        - eta/(1-eta) * E_{d^beta, a~beta}[(a - beta(s))^2]

with ``D(s) = (1 - beta(pi*(s)|s)) / beta(pi*(s)|s)``.  Squared action
differences need actions on a number line, so every discrete action gets a
scalar embedding (default: index mapped linearly onto [-1, 1]) and
``beta(s)`` stands for the behavior's mean embedded action.  The checker only
reports whether the inequality holds; it never asserts it.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .envs import OfflineDataset, TabularMDP

BOUND_SLACK = 1e-9


@dataclass(frozen=True, eq=False)
class TabularPolicy:
    probs: np.ndarray  # (S, A)

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64)
        if p.ndim != 2:
            raise ValueError("policy table must be (n_states, n_actions)")
        if np.any(p < 0) or np.max(np.abs(p.sum(axis=1) - 1.0)) > 1e-12:
            raise ValueError("each policy row must be a probability distribution")
        object.__setattr__(self, "probs", p)

    @classmethod
    def deterministic(cls, actions, n_actions: int) -> "TabularPolicy":
        actions = np.asarray(actions, dtype=np.int64)
        return cls(np.eye(n_actions)[actions])

    @classmethod
    def uniform(cls, n_states: int, n_actions: int) -> "TabularPolicy":
        return cls(np.full((n_states, n_actions), 1.0 / n_actions))

    @property
    def is_deterministic(self) -> bool:
        return bool(np.all((self.probs == 0.0) | (self.probs == 1.0)))

    def greedy_actions(self) -> np.ndarray:
        return np.argmax(self.probs, axis=1)


def _policy_matrices(mdp: TabularMDP, policy: TabularPolicy):
    if policy.probs.shape != (mdp.n_states, mdp.n_actions):
        raise ValueError(f"policy shape {policy.probs.shape} does not match MDP "
                         f"({mdp.n_states}, {mdp.n_actions})")
    r_pi = np.sum(policy.probs * mdp.reward_table, axis=1)
    P_pi = np.einsum("sa,sat->st", policy.probs, mdp.transition_tensor)
    return r_pi, P_pi


def exact_policy_value(mdp: TabularMDP, policy: TabularPolicy) -> tuple[np.ndarray, float]:
    """Solve ``V = r_pi + gamma P_pi V`` directly; returns ``(V, mu0 . V)``."""
    if not 0.0 <= mdp.gamma < 1.0:
        raise np.linalg.LinAlgError(f"policy evaluation is singular for gamma={mdp.gamma}")
    r_pi, P_pi = _policy_matrices(mdp, policy)
    A = np.eye(mdp.n_states) - mdp.gamma * P_pi
    V = np.linalg.solve(A, r_pi)
    residual = np.max(np.abs(V - (r_pi + mdp.gamma * P_pi @ V)))
    if residual > 1e-10:
        # one step of iterative refinement is enough for these well-conditioned systems
        V = V + np.linalg.solve(A, r_pi - A @ V)
    return V, float(mdp.initial_distribution @ V)


def visitation_distribution(mdp: TabularMDP, policy: TabularPolicy) -> np.ndarray:
    """Normalised discounted state occupancy ``(1-gamma) mu0^T (I - gamma P_pi)^-1``."""
    if not 0.0 <= mdp.gamma < 1.0:
        raise np.linalg.LinAlgError(f"occupancy is undefined for gamma={mdp.gamma}")
    _, P_pi = _policy_matrices(mdp, policy)
    A = np.eye(mdp.n_states) - mdp.gamma * P_pi
    d = (1.0 - mdp.gamma) * np.linalg.solve(A.T, mdp.initial_distribution)
    return np.clip(d, 0.0, None)


def _draw(cdf_rows: np.ndarray, u: np.ndarray) -> np.ndarray:
    # inverse-CDF sampling, one row per chain
    return np.minimum((u[:, None] >= cdf_rows).sum(axis=1), cdf_rows.shape[1] - 1)


def monte_carlo_visitation(mdp: TabularMDP, policy: TabularPolicy, n_steps: int,
                           rng: np.random.Generator, n_chains: int = 1000) -> np.ndarray:
    """Estimate the discounted occupancy by geometric-restart sampling.

    Sampling ``s_0 ~ mu0`` and continuing each step with probability ``gamma``
    visits states in proportion to the discounted occupancy.  ``n_chains``
    independent chains run side by side for ``n_steps // n_chains`` steps.
    """
    S = mdp.n_states
    cdf_P = np.cumsum(mdp.transition_tensor, axis=2)
    cdf_pi = np.cumsum(policy.probs, axis=1)
    cdf_mu = np.broadcast_to(np.cumsum(mdp.initial_distribution), (n_chains, S))
    steps = max(1, n_steps // n_chains)
    counts = np.zeros(S)
    s = _draw(cdf_mu, rng.random(n_chains))
    for _ in range(steps):
        counts += np.bincount(s, minlength=S)
        u = rng.random((3, n_chains))
        restart = u[0] > mdp.gamma
        a = _draw(cdf_pi[s], u[1])
        s_next = _draw(cdf_P[s, a], u[2])
        s = np.where(restart, _draw(cdf_mu, u[1]), s_next)
    return counts / counts.sum()


# ---------------------------------------------------------------------------
# Empirical models from offline data


def empirical_mdp(dataset: OfflineDataset, mdp_like: TabularMDP) -> TabularMDP:
    """Count-based model; unseen (s, a) pairs become zero-reward self-loops."""
    S, A = mdp_like.n_states, mdp_like.n_actions
    s = np.argmax(dataset.states, axis=1)
    a = dataset.actions[:, 0].astype(np.int64)
    s2 = np.argmax(dataset.next_states, axis=1)
    counts = np.zeros((S, A, S))
    np.add.at(counts, (s, a, s2), 1.0)
    reward_sum = np.zeros((S, A))
    np.add.at(reward_sum, (s, a), dataset.rewards)
    n_sa = counts.sum(axis=2)
    P = np.zeros_like(counts)
    R = np.zeros((S, A))
    seen = n_sa > 0
    P[seen] = counts[seen] / n_sa[seen][:, None]
    R[seen] = reward_sum[seen] / n_sa[seen]
    for si, ai in zip(*np.nonzero(~seen)):
        P[si, ai, si] = 1.0
    return TabularMDP(P, R, mdp_like.gamma, mdp_like.initial_distribution)


def empirical_behavior(dataset: OfflineDataset, n_states: int, n_actions: int) -> TabularPolicy:
    """Action frequencies per state; unvisited states get the uniform policy."""
    s = np.argmax(dataset.states, axis=1)
    a = dataset.actions[:, 0].astype(np.int64)
    counts = np.zeros((n_states, n_actions))
    np.add.at(counts, (s, a), 1.0)
    totals = counts.sum(axis=1, keepdims=True)
    probs = np.where(totals > 0, counts / np.maximum(totals, 1.0), 1.0 / n_actions)
    probs = probs / probs.sum(axis=1, keepdims=True)
    return TabularPolicy(probs)


# ---------------------------------------------------------------------------
# Bound checker


@dataclass
class BoundReport:
    J_pi_star: float
    J_behavior: float
    term_D: float
    term_quad_pi: float
    term_quad_beta: float
    lhs: float
    rhs: float
    holds: bool
    alpha: float
    eta: float
    gamma: float
    applicable: bool = True
    undefined_states: list = field(default_factory=list)
    term_quad_pi_empirical: float | None = None
    value_shift: list = field(default_factory=list)

    def consistent(self, tol: float = 1e-12) -> bool:
        """Check the report's own arithmetic."""
        if not self.applicable:
            return not self.holds
        return (abs(self.lhs - (self.J_pi_star - self.J_behavior)) <= tol * max(1.0, abs(self.lhs))
                and abs(self.rhs - (self.term_D + self.term_quad_pi - self.term_quad_beta))
                <= tol * max(1.0, abs(self.rhs))
                and self.holds == (self.lhs >= self.rhs - BOUND_SLACK))

    def to_text(self) -> str:
        lines = []
        for key, value in asdict(self).items():
            if isinstance(value, list):
                value = ",".join(repr(float(v)) if isinstance(v, float) else str(v) for v in value)
            elif isinstance(value, float):
                value = repr(value)
            lines.append(f"{key}={value}")
        return "\n".join(lines) + "\n"


def default_action_embedding(n_actions: int) -> np.ndarray:
    return np.linspace(-1.0, 1.0, n_actions) if n_actions > 1 else np.zeros(1)


def check_theorem1(mdp: TabularMDP, pi_star: TabularPolicy, behavior: TabularPolicy,
                   action_embedding=None, alpha: float = 1.0, eta: float = 0.5,
                   empirical: TabularMDP | None = None) -> BoundReport:
    """Evaluate every term of the bound exactly and report whether it holds.

    If ``empirical`` is given, the policy-quadratic term is additionally
    computed under the occupancy of ``pi*`` in that model.
    """
    if not pi_star.is_deterministic:
        raise ValueError("pi_star must be deterministic")
    if not 0.0 < eta < 1.0:
        raise ValueError("eta must lie in (0, 1)")
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    e = default_action_embedding(mdp.n_actions) if action_embedding is None else np.asarray(
        action_embedding, dtype=np.float64)
    if e.shape != (mdp.n_actions,):
        raise ValueError("action_embedding needs one scalar per action")
    g = mdp.gamma
    a_star = pi_star.greedy_actions()
    states = np.arange(mdp.n_states)
    V_star, J_star = exact_policy_value(mdp, pi_star)
    _, J_beta = exact_policy_value(mdp, behavior)
    d_star = visitation_distribution(mdp, pi_star)
    d_beta = visitation_distribution(mdp, behavior)
    beta_sel = behavior.probs[states, a_star]
    undefined = [int(s) for s in states if beta_sel[s] == 0.0 and d_star[s] > 0.0]
    coef = eta / (1.0 - eta)
    mean_e = behavior.probs @ e
    quad_pi_state = (e[a_star] - mean_e) ** 2
    term_quad_pi = coef * float(d_star @ quad_pi_state)
    term_quad_beta = coef * float(d_beta @ np.sum(behavior.probs * (e[None, :] - mean_e[:, None]) ** 2, axis=1))
    quad_emp = None
    if empirical is not None:
        quad_emp = coef * float(visitation_distribution(empirical, pi_star) @ quad_pi_state)
    lhs = J_star - J_beta
    if undefined:
        return BoundReport(J_star, J_beta, float("nan"), term_quad_pi, term_quad_beta, lhs, float("nan"),
                           False, alpha, eta, g, applicable=False, undefined_states=undefined,
                           term_quad_pi_empirical=quad_emp)
    with np.errstate(divide="ignore", invalid="ignore"):
        D = np.where(beta_sel > 0, (1.0 - beta_sel) / beta_sel, 0.0)
    term_D = alpha / (1.0 - g) * float(d_star @ D)
    rhs = term_D + term_quad_pi - term_quad_beta
    return BoundReport(J_star, J_beta, term_D, term_quad_pi, term_quad_beta, lhs, rhs,
                       bool(lhs >= rhs - BOUND_SLACK), alpha, eta, g,
                       term_quad_pi_empirical=quad_emp, value_shift=list(V_star - alpha * D))


def bound_grid(mdp: TabularMDP, pi_star: TabularPolicy, behavior: TabularPolicy, alphas, etas,
               action_embedding=None, empirical=None) -> list[BoundReport]:
    return [check_theorem1(mdp, pi_star, behavior, action_embedding, a, e, empirical)
            for a in alphas for e in etas]
