"""Toy environments, quality-tiered offline datasets and their on-disk format.

Three environments are available through :func:`make_env`:

``chain-3``
    3-state chain, actions {left, right}, 10% chance the chosen action is
    flipped.  Reward 1 whenever the agent lands in the rightmost state.
``gridworld-5x5``
    4-action gridworld with 10% slip to a uniformly random direction; entering
    the bottom-right goal pays 1 and ends the episode.
``pointmass-2d``
    Frictionless double integrator on the plane, dt = 0.05, 100 steps per
    episode, reward ``-||position - goal||``.

Tabular environments emit one-hot observations so that the same networks can
consume every environment.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .approximator import ApproximatorParams, forward

ENV_IDS = ("gridworld-5x5", "pointmass-2d", "chain-3")
QUALITIES = ("expert", "medium", "medium_replay", "random", "mixed")
TIER_EPSILON = {"expert": 0.05, "medium": 0.35, "random": 1.0}

FORD_MAGIC = b"FORD"
FORD_VERSION = 1


# ---------------------------------------------------------------------------
# Tabular MDPs


@dataclass(frozen=True, eq=False)
class TabularMDP:
    transition_tensor: np.ndarray  # (S, A, S')
    reward_table: np.ndarray  # (S, A)
    gamma: float
    initial_distribution: np.ndarray

    def __post_init__(self):
        P = np.asarray(self.transition_tensor, dtype=np.float64)
        R = np.asarray(self.reward_table, dtype=np.float64)
        mu0 = np.asarray(self.initial_distribution, dtype=np.float64)
        object.__setattr__(self, "transition_tensor", P)
        object.__setattr__(self, "reward_table", R)
        object.__setattr__(self, "initial_distribution", mu0)
        if P.ndim != 3 or P.shape[0] != P.shape[2] or P.shape[0] < 1 or P.shape[1] < 1:
            raise ValueError(f"transition tensor must be (S, A, S), got {P.shape}")
        if R.shape != P.shape[:2]:
            raise ValueError(f"reward table shape {R.shape} does not match {P.shape[:2]}")
        if mu0.shape != (P.shape[0],):
            raise ValueError("initial distribution has the wrong length")
        if np.any(P < 0) or np.max(np.abs(P.sum(axis=2) - 1.0)) > 1e-12:
            raise ValueError("every (s, a) row of the transition tensor must be a distribution")
        if np.any(mu0 < 0) or abs(mu0.sum() - 1.0) > 1e-12:
            raise ValueError("initial distribution must sum to 1")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError(f"gamma must lie in [0, 1), got {self.gamma}")

    @property
    def n_states(self) -> int:
        return self.transition_tensor.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition_tensor.shape[1]


def value_iteration(mdp: TabularMDP, tol: float = 1e-12, max_iter: int = 100_000):
    """Optimal state values and a greedy deterministic policy (action indices)."""
    P, R, g = mdp.transition_tensor, mdp.reward_table, mdp.gamma
    V = np.zeros(mdp.n_states)
    for _ in range(max_iter):
        Q = R + g * P @ V
        V_new = Q.max(axis=1)
        if np.max(np.abs(V_new - V)) < tol:
            V = V_new
            break
        V = V_new
    Q = R + g * P @ V
    return V, Q.argmax(axis=1)


def chain_mdp(n_states: int = 3, slip: float = 0.1, gamma: float = 0.9) -> TabularMDP:
    P = np.zeros((n_states, 2, n_states))
    for s in range(n_states):
        left, right = max(s - 1, 0), min(s + 1, n_states - 1)
        P[s, 0, left] += 1.0 - slip
        P[s, 0, right] += slip
        P[s, 1, right] += 1.0 - slip
        P[s, 1, left] += slip
    R = P[:, :, n_states - 1].copy()
    return TabularMDP(P, R, gamma, np.full(n_states, 1.0 / n_states))


_GRID_MOVES = ((-1, 0), (1, 0), (0, -1), (0, 1))  # up, down, left, right


def gridworld_mdp(size: int = 5, slip: float = 0.1, gamma: float = 0.95) -> TabularMDP:
    n = size * size
    goal = n - 1
    P = np.zeros((n, 4, n))
    R = np.zeros((n, 4))
    for s in range(n):
        if s == goal:
            P[s, :, s] = 1.0
            continue
        r, c = divmod(s, size)
        dests = []
        for dr, dc in _GRID_MOVES:
            rr, cc = r + dr, c + dc
            dests.append(rr * size + cc if 0 <= rr < size and 0 <= cc < size else s)
        for a in range(4):
            P[s, a, dests[a]] += 1.0 - slip
            for d in dests:
                P[s, a, d] += slip / 4
    R[:, :] = P[:, :, goal]
    R[goal] = 0.0
    mu0 = np.full(n, 1.0 / (n - 1))
    mu0[goal] = 0.0
    return TabularMDP(P, R, gamma, mu0)


# ---------------------------------------------------------------------------
# Environments


@dataclass(frozen=True)
class EnvSpec:
    env_id: str
    state_dim: int
    action_dim: int
    discrete: bool
    horizon: int
    gamma: float
    n_actions: int = 0
    action_low: float = -1.0
    action_high: float = 1.0


class TabularEnv:
    """Episodic simulator for a :class:`TabularMDP` with one-hot observations."""

    def __init__(self, env_id: str, mdp: TabularMDP, horizon: int, terminal_states=(), seed=0):
        self.mdp = mdp
        self.terminal_states = frozenset(terminal_states)
        self.spec = EnvSpec(env_id, mdp.n_states, 1, True, horizon, mdp.gamma, n_actions=mdp.n_actions)
        self.rng = np.random.default_rng(seed)
        self._expert = value_iteration(mdp)[1]
        self._state = 0
        self._t = 0

    def obs(self, s: int) -> np.ndarray:
        o = np.zeros(self.mdp.n_states)
        o[s] = 1.0
        return o

    def reset(self, seed=None) -> np.ndarray:
        if seed is not None:
            self.rng = np.random.default_rng(seed)
        self._state = int(self.rng.choice(self.mdp.n_states, p=self.mdp.initial_distribution))
        self._t = 0
        return self.obs(self._state)

    def step(self, action):
        a = int(np.asarray(action).reshape(-1)[0])
        if not 0 <= a < self.mdp.n_actions:
            raise ValueError(f"action {a} outside 0..{self.mdp.n_actions - 1}")
        s = self._state
        s_next = int(self.rng.choice(self.mdp.n_states, p=self.mdp.transition_tensor[s, a]))
        reward = 1.0 if self._reward_hit(s, s_next) else 0.0
        self._state = s_next
        self._t += 1
        terminal = s_next in self.terminal_states
        truncated = self._t >= self.spec.horizon
        return self.obs(s_next), reward, terminal, truncated

    def _reward_hit(self, s: int, s_next: int) -> bool:
        # reward tables of the bundled MDPs are P(land in target state)
        return s_next == self._reward_state and s not in self.terminal_states

    @property
    def _reward_state(self) -> int:
        return self.mdp.n_states - 1

    def expert_action(self, obs: np.ndarray) -> int:
        return int(self._expert[int(np.argmax(obs))])

    def random_action(self):
        return int(self.rng.integers(self.mdp.n_actions))


class PointMassEnv:
    """Planar double integrator; state is (x, y, vx, vy), action is acceleration."""

    dt = 0.05

    def __init__(self, seed=0, horizon: int = 100, gamma: float = 0.99, kp: float = 3.0, kd: float = 3.5):
        self.spec = EnvSpec("pointmass-2d", 4, 2, False, horizon, gamma)
        self.goal = np.zeros(2)
        self.kp, self.kd = kp, kd
        self.rng = np.random.default_rng(seed)
        self._state = np.zeros(4)
        self._t = 0

    def reset(self, seed=None) -> np.ndarray:
        if seed is not None:
            self.rng = np.random.default_rng(seed)
        self._state = np.concatenate([self.rng.uniform(-1.0, 1.0, size=2), np.zeros(2)])
        self._t = 0
        return self._state.copy()

    def step(self, action):
        a = np.clip(np.asarray(action, dtype=np.float64).reshape(2), -1.0, 1.0)
        pos, vel = self._state[:2], self._state[2:]
        vel = vel + self.dt * a
        pos = pos + self.dt * vel
        self._state = np.concatenate([pos, vel])
        self._t += 1
        reward = -float(np.linalg.norm(pos - self.goal))
        return self._state.copy(), reward, False, self._t >= self.spec.horizon

    def expert_action(self, obs: np.ndarray) -> np.ndarray:
        obs = np.asarray(obs, dtype=np.float64)
        return np.clip(-self.kp * (obs[:2] - self.goal) - self.kd * obs[2:], -1.0, 1.0)

    def random_action(self) -> np.ndarray:
        return self.rng.uniform(-1.0, 1.0, size=2)


def make_env(env_id: str, seed=0):
    if env_id == "chain-3":
        return TabularEnv(env_id, chain_mdp(), horizon=100, seed=seed)
    if env_id == "gridworld-5x5":
        return TabularEnv(env_id, gridworld_mdp(), horizon=50, terminal_states=(24,), seed=seed)
    if env_id == "pointmass-2d":
        return PointMassEnv(seed=seed)
    raise ValueError(f"unknown env_id {env_id!r}; valid ids: {', '.join(ENV_IDS)}")


# ---------------------------------------------------------------------------
# Offline datasets


@dataclass(frozen=True)
class Transition:
    state: np.ndarray
    action: np.ndarray | int
    reward: float
    next_state: np.ndarray
    terminal: bool


@dataclass(frozen=True, eq=False)
class OfflineDataset:
    """Column-stored transitions; arrays are made read-only on construction."""

    states: np.ndarray
    actions: np.ndarray  # (n, action_dim); tabular envs store the index as a float column
    rewards: np.ndarray
    next_states: np.ndarray
    terminals: np.ndarray
    episodes: np.ndarray
    quality: str
    behavior_epsilon: float
    env_id: str
    seed: int

    def __post_init__(self):
        n = len(self.rewards)
        if n == 0:
            raise ValueError("dataset must be non-empty")
        if self.quality not in QUALITIES:
            raise ValueError(f"unknown quality {self.quality!r}")
        casts = dict(states=np.float64, actions=np.float64, rewards=np.float64,
                     next_states=np.float64, terminals=bool, episodes=np.int64)
        for name, dtype in casts.items():
            arr = np.array(getattr(self, name), dtype=dtype)
            if arr.shape[0] != n:
                raise ValueError(f"column {name} has {arr.shape[0]} rows, expected {n}")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def __len__(self) -> int:
        return len(self.rewards)

    def __getitem__(self, i: int) -> Transition:
        action = self.actions[i]
        if self.env_id in ("chain-3", "gridworld-5x5"):
            action = int(action[0])
        return Transition(self.states[i], action, float(self.rewards[i]),
                          self.next_states[i], bool(self.terminals[i]))

    @property
    def discrete(self) -> bool:
        return self.env_id in ("chain-3", "gridworld-5x5")

    def episode_returns(self, gamma: float = 1.0) -> np.ndarray:
        """Discounted return of every episode, in order of appearance."""
        out = []
        for ep in np.unique(self.episodes):
            r = self.rewards[self.episodes == ep]
            out.append(float(np.sum(r * gamma ** np.arange(len(r)))))
        return np.array(out)

    def sample(self, rng: np.random.Generator, batch_size: int) -> np.ndarray:
        return rng.integers(0, len(self), size=batch_size)

    def batch(self, idx) -> "Batch":
        return Batch(self.states[idx], self.actions[idx], self.rewards[idx],
                     self.next_states[idx], self.terminals[idx].astype(np.float64))


@dataclass(frozen=True)
class Batch:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    terminals: np.ndarray  # float 0/1

    def __len__(self) -> int:
        return len(self.rewards)


def concat_datasets(datasets, quality: str = "mixed", seed: int = 0) -> OfflineDataset:
    """Pool datasets; episode ids are renumbered so they stay distinct."""
    datasets = list(datasets)
    env_ids = {d.env_id for d in datasets}
    if len(env_ids) != 1:
        raise ValueError(f"cannot pool datasets from different environments: {sorted(env_ids)}")
    episodes, offset = [], 0
    for d in datasets:
        episodes.append(d.episodes - d.episodes.min() + offset)
        offset = episodes[-1].max() + 1
    eps = float(np.mean([d.behavior_epsilon for d in datasets]))
    return OfflineDataset(
        np.concatenate([d.states for d in datasets]),
        np.concatenate([d.actions for d in datasets]),
        np.concatenate([d.rewards for d in datasets]),
        np.concatenate([d.next_states for d in datasets]),
        np.concatenate([d.terminals for d in datasets]),
        np.concatenate(episodes), quality, eps, datasets[0].env_id, seed)


def epsilon_greedy(env, epsilon: float) -> Callable:
    """Behavior policy: the env's expert, replaced by a uniform action w.p. epsilon."""

    def act(obs, rng):
        if rng.random() < epsilon:
            if env.spec.discrete:
                return int(rng.integers(env.spec.n_actions))
            return rng.uniform(env.spec.action_low, env.spec.action_high, size=env.spec.action_dim)
        return env.expert_action(obs)

    act.epsilon = epsilon
    return act


def _rollout_transitions(env, behavior, n: int, rng: np.random.Generator, episode_offset: int = 0):
    spec = env.spec
    S = np.zeros((n, spec.state_dim))
    A = np.zeros((n, spec.action_dim))
    R = np.zeros(n)
    S2 = np.zeros((n, spec.state_dim))
    D = np.zeros(n, dtype=bool)
    E = np.zeros(n, dtype=np.int64)
    episode = episode_offset
    obs = env.reset(seed=int(rng.integers(2**63 - 1)))
    for i in range(n):
        a = behavior(obs, rng)
        nxt, r, term, trunc = env.step(a)
        S[i], A[i], R[i], S2[i], D[i], E[i] = obs, a, r, nxt, term, episode
        obs = nxt
        if term or trunc:
            episode += 1
            obs = env.reset(seed=int(rng.integers(2**63 - 1)))
    return S, A, R, S2, D, E


def generate_dataset(env, behavior=None, n_transitions: int = 20_000, quality: str = "medium",
                     seed: int = 0) -> OfflineDataset:
    """Roll out a behavior policy for exactly ``n_transitions`` steps.

    With ``behavior=None`` the tier's epsilon-greedy expert is used; the
    ``medium_replay`` tier splits the budget 1:1:1 over expert/medium/random
    and ``mixed`` (medium-expert) splits it 1:1 over expert/medium.
    ``behavior`` may otherwise be any ``f(obs, rng) -> action``.
    """
    if n_transitions <= 0:
        raise ValueError("n_transitions must be positive")
    if quality not in QUALITIES:
        raise ValueError(f"unknown quality {quality!r}; expected one of {QUALITIES}")
    rng = np.random.default_rng(seed)
    if behavior is not None:
        tiers = [(behavior, n_transitions)]
    elif quality in TIER_EPSILON:
        tiers = [(epsilon_greedy(env, TIER_EPSILON[quality]), n_transitions)]
    else:
        names = ("expert", "medium", "random") if quality == "medium_replay" else ("expert", "medium")
        sizes = [n_transitions // len(names)] * len(names)
        sizes[0] += n_transitions - sum(sizes)
        tiers = [(epsilon_greedy(env, TIER_EPSILON[t]), k) for t, k in zip(names, sizes)]

    parts, episode = [], 0
    for policy, k in tiers:
        if k == 0:
            continue
        cols = _rollout_transitions(env, policy, k, rng, episode)
        episode = int(cols[-1].max()) + 1
        parts.append(cols)
    cols = [np.concatenate(c) for c in zip(*parts)]
    eps = float(np.mean([getattr(p, "epsilon", np.nan) for p, k in tiers if k]))
    return OfflineDataset(*cols, quality=quality, behavior_epsilon=eps if np.isfinite(eps) else 0.0,
                          env_id=env.spec.env_id, seed=int(seed))


# ---------------------------------------------------------------------------
# Policy evaluation


def actor_policy(actor, spec: EnvSpec) -> Callable:
    """Wrap actor params (or a callable) as ``obs -> action``; tabular actors act greedily."""
    if callable(actor):
        return actor
    if not isinstance(actor, ApproximatorParams):
        raise TypeError("actor must be ApproximatorParams or a callable")
    if actor.input_dim != spec.state_dim:
        raise ValueError(f"actor expects {actor.input_dim} inputs, env emits {spec.state_dim}")
    if spec.discrete:
        return lambda obs: int(np.argmax(forward(actor, obs)))
    return lambda obs: forward(actor, obs)


def evaluate_policy(env, actor, n_episodes: int = 10, seed: int = 0,
                    discounted: bool = False) -> tuple[float, float]:
    """Monte-Carlo mean and std of the episode return."""
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    policy = actor_policy(actor, env.spec)
    rng = np.random.default_rng(seed)
    returns = np.zeros(n_episodes)
    for ep in range(n_episodes):
        obs = env.reset(seed=int(rng.integers(2**63 - 1)))
        total, disc, done = 0.0, 1.0, False
        while not done:
            obs, r, term, trunc = env.step(policy(obs))
            total += disc * r
            if discounted:
                disc *= env.spec.gamma
            done = term or trunc
        returns[ep] = total
    return float(returns.mean()), float(returns.std())


# ---------------------------------------------------------------------------
# Persistence


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<H", len(raw)) + raw


def _unpack_str(buf: memoryview, pos: int) -> tuple[str, int]:
    (n,) = struct.unpack_from("<H", buf, pos)
    pos += 2
    return bytes(buf[pos:pos + n]).decode("utf-8"), pos + n


def dataset_rows(ds: OfflineDataset) -> np.ndarray:
    """Row layout: state | action | reward | next_state | terminal | episode."""
    return np.column_stack([ds.states, ds.actions, ds.rewards, ds.next_states,
                            ds.terminals.astype(np.float64), ds.episodes.astype(np.float64)])


def dataset_to_bytes(ds: OfflineDataset) -> bytes:
    header = (FORD_MAGIC + struct.pack("<H", FORD_VERSION) + _pack_str(ds.env_id) + _pack_str(ds.quality)
              + struct.pack("<dQQII", ds.behavior_epsilon, ds.seed & (2**64 - 1), len(ds),
                            ds.states.shape[1], ds.actions.shape[1]))
    return header + dataset_rows(ds).astype("<f8").tobytes(order="C")


def dataset_from_bytes(raw: bytes) -> OfflineDataset:
    buf = memoryview(raw)
    if bytes(buf[:4]) != FORD_MAGIC:
        raise ValueError("not a FORD dataset file (bad magic)")
    (version,) = struct.unpack_from("<H", buf, 4)
    if version != FORD_VERSION:
        raise ValueError(f"unsupported FORD version {version}")
    env_id, pos = _unpack_str(buf, 6)
    quality, pos = _unpack_str(buf, pos)
    eps, seed, n, ds_, da = struct.unpack_from("<dQQII", buf, pos)
    pos += struct.calcsize("<dQQII")
    width = 2 * ds_ + da + 3
    rows = np.frombuffer(raw, dtype="<f8", count=n * width, offset=pos).reshape(n, width)
    if pos + rows.nbytes != len(raw):
        raise ValueError("FORD file has trailing or missing bytes")
    S, A = rows[:, :ds_], rows[:, ds_:ds_ + da]
    R, S2 = rows[:, ds_ + da], rows[:, ds_ + da + 1:2 * ds_ + da + 1]
    return OfflineDataset(S, A, R, S2, rows[:, -2] != 0.0, rows[:, -1].astype(np.int64),
                          quality=quality, behavior_epsilon=eps, env_id=env_id, seed=int(seed))


def save_dataset(ds: OfflineDataset, path) -> Path:
    path = Path(path)
    path.write_bytes(dataset_to_bytes(ds))
    return path


def load_dataset(path) -> OfflineDataset:
    return dataset_from_bytes(Path(path).read_bytes())


def export_csv(ds: OfflineDataset, path) -> Path:
    path = Path(path)
    header = ([f"s{i}" for i in range(ds.states.shape[1])] + [f"a{i}" for i in range(ds.actions.shape[1])]
              + ["reward"] + [f"next_s{i}" for i in range(ds.states.shape[1])] + ["terminal", "episode"])
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in dataset_rows(ds):
            writer.writerow([repr(float(v)) for v in row])
    return path
