"""Device runtime, parameter transport, server aggregation and the round loop.

Four training schemes share the same machinery:

* ``forler``: devices run conservative critic updates and the rectified actor
  update and upload only their two critic heads; the server pools the ``2K``
  heads into a pessimistic ensemble, refines it together with the global actor
  on its own dataset, and broadcasts the actor plus its two most pessimistic
  heads.
* ``fed_cql`` / ``fed_td3bc``: devices upload critics and actor, the server
  averages them with dataset-size weights.
* ``centralized_cql``: a single learner on the pooled data, logged with the
  same schema.

Rounds are synchronous and every random stream is derived from the run seed,
so results never depend on the order in which devices finish.
"""

from __future__ import annotations

import csv
import json
import logging
import struct
import time
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .approximator import (ACTIVATIONS, ApproximatorParams, LayerSpec, NonFiniteError, OptimizerState,
                           init_params, make_optimizer, mlp_header, optimizer_step, polyak_update)
from .config import ExperimentConfig, config_hash, effective_config_json
from .envs import OfflineDataset, concat_datasets, evaluate_policy, generate_dataset, make_env
from .losses import (CriticPair, LocalLossConfig, actor_output, cql_critic_loss, ensemble_critic_loss,
                     ensemble_target, forward, rectified_actor_loss, server_actor_loss,
                     server_policy_sample, td3bc_actor_loss)
from .rectifier import RectifiedCache, greedy_tabular_actions, periodic_rectify

log = logging.getLogger(__name__)

PAYLOAD_KINDS = ("critic_pair", "global_actor", "global_critic", "local_actor")
LOG_COLUMNS = ("round", "algorithm", "seed", "global_return", "device_id", "device_return",
               "q_evals", "elapsed_ms")
ENVELOPE_MAGIC = b"FORP"
ENVELOPE_VERSION = 1


class DeviceAbort(RuntimeError):
    def __init__(self, device_id, message):
        super().__init__(f"device {device_id}: {message}")
        self.device_id = device_id


# ---------------------------------------------------------------------------
# Transport


def _pack_params(p: ApproximatorParams) -> bytes:
    out = [struct.pack("<I", len(p.shape_header))]
    for spec in p.shape_header:
        out.append(struct.pack("<IIB", spec.input_dim, spec.output_dim, ACTIVATIONS.index(spec.activation)))
    out.append(struct.pack("<Q", p.values.shape[0]))
    out.append(p.values.astype("<f8").tobytes())
    return b"".join(out)


def _unpack_params(buf: bytes, pos: int) -> tuple[ApproximatorParams, int]:
    (n_layers,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    header = []
    for _ in range(n_layers):
        i, o, act = struct.unpack_from("<IIB", buf, pos)
        pos += struct.calcsize("<IIB")
        header.append(LayerSpec(i, o, ACTIVATIONS[act]))
    (n,) = struct.unpack_from("<Q", buf, pos)
    pos += 8
    values = np.frombuffer(buf, dtype="<f8", count=n, offset=pos).astype(np.float64)
    return ApproximatorParams(tuple(header), values), pos + 8 * n


@dataclass(frozen=True, eq=False)
class ParamEnvelope:
    """One message on the device/server channel.

    Wire format (little endian): ``FORP``, u16 version, u16-prefixed sender id,
    u32 round, u8 kind, u32 parameter-set count, then per set a u32 layer
    count, ``(u32 in, u32 out, u8 activation)`` per layer, u64 value count and
    the float64 values.  A trailing u32 CRC-32 covers everything before it.
    """

    sender_id: str
    round: int
    kind: str
    params: tuple[ApproximatorParams, ...]

    def __post_init__(self):
        if self.kind not in PAYLOAD_KINDS:
            raise ValueError(f"unknown payload kind {self.kind!r}")
        object.__setattr__(self, "params", tuple(self.params))

    def body(self) -> bytes:
        sid = str(self.sender_id).encode("utf-8")
        parts = [ENVELOPE_MAGIC, struct.pack("<HH", ENVELOPE_VERSION, len(sid)), sid,
                 struct.pack("<IBI", self.round, PAYLOAD_KINDS.index(self.kind), len(self.params))]
        parts.extend(_pack_params(p) for p in self.params)
        return b"".join(parts)

    @property
    def checksum(self) -> int:
        return zlib.crc32(self.body()) & 0xFFFFFFFF

    def to_bytes(self) -> bytes:
        body = self.body()
        return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)

    @classmethod
    def from_bytes(cls, raw: bytes) -> "ParamEnvelope":
        if len(raw) < 4 or raw[:4] != ENVELOPE_MAGIC:
            raise ValueError("not a parameter envelope (bad magic)")
        body, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
        if zlib.crc32(body) & 0xFFFFFFFF != crc:
            raise ValueError("envelope checksum mismatch")
        version, n_sid = struct.unpack_from("<HH", body, 4)
        if version != ENVELOPE_VERSION:
            raise ValueError(f"unsupported envelope version {version}")
        pos = 8
        sender = body[pos:pos + n_sid].decode("utf-8")
        pos += n_sid
        rnd, kind, count = struct.unpack_from("<IBI", body, pos)
        pos += struct.calcsize("<IBI")
        params = []
        for _ in range(count):
            p, pos = _unpack_params(body, pos)
            params.append(p)
        if pos != len(body):
            raise ValueError("envelope has trailing bytes")
        return cls(sender, rnd, PAYLOAD_KINDS[kind], tuple(params))


def transmit(envelope: ParamEnvelope) -> ParamEnvelope:
    """In-process channel: serialise and parse, exactly as a network hop would."""
    return ParamEnvelope.from_bytes(envelope.to_bytes())


# ---------------------------------------------------------------------------
# Network construction


def critic_header(spec, hidden) -> tuple[LayerSpec, ...]:
    if spec.discrete:
        return mlp_header(spec.state_dim, spec.n_actions, hidden)
    return mlp_header(spec.state_dim + spec.action_dim, 1, hidden)


def actor_header(spec, hidden) -> tuple[LayerSpec, ...]:
    if spec.discrete:
        return mlp_header(spec.state_dim, spec.n_actions, hidden)
    return mlp_header(spec.state_dim, spec.action_dim, hidden, output_activation="tanh")


# ---------------------------------------------------------------------------
# Device side


@dataclass
class DeviceState:
    device_id: str
    dataset: OfflineDataset
    actor: ApproximatorParams
    critics: CriticPair
    snapshot: ApproximatorParams
    actor_opt: OptimizerState
    q1_opt: OptimizerState
    q2_opt: OptimizerState
    cache: RectifiedCache = field(default_factory=RectifiedCache)
    tau: int = 0
    flagged: bool = False
    q_evals_round: int = 0


def make_device(device_id: str, dataset: OfflineDataset, actor: ApproximatorParams,
                q1: ApproximatorParams, q2: ApproximatorParams, lr: float,
                actor_lr: float | None = None) -> DeviceState:
    return DeviceState(device_id, dataset, actor.copy(), CriticPair.from_online(q1.copy(), q2.copy()),
                       actor.copy(), make_optimizer(actor, actor_lr or lr), make_optimizer(q1, lr),
                       make_optimizer(q2, lr))


def device_receive(state: DeviceState, actor_env: ParamEnvelope, critic_env: ParamEnvelope) -> DeviceState:
    """Load the broadcast global actor and critic pair; resets the round bookkeeping."""
    actor = actor_env.params[0]
    q1, q2 = critic_env.params[:2]
    if actor.shape_header != state.actor.shape_header or q1.shape_header != state.critics.q1.shape_header:
        raise ValueError(f"device {state.device_id}: broadcast shapes do not match local networks")
    return replace(state, actor=actor.copy(), snapshot=actor.copy(),
                   critics=CriticPair.from_online(q1.copy(), q2.copy()),
                   cache=RectifiedCache(), tau=0, flagged=False, q_evals_round=0)


def device_round(state: DeviceState, cfg: ExperimentConfig, rng: np.random.Generator,
                 round_index: int = 0) -> tuple[DeviceState, list[ParamEnvelope]]:
    """Run ``cfg.local_steps`` local iterations and package the upload.

    ``forler`` uploads the critic pair only; the FedAvg baselines also upload
    their actor.  Raises :class:`DeviceAbort` if a loss stops being finite.
    """
    algo = cfg.algorithm
    loss_cfg = cfg.loss
    fed = cfg.federation
    discrete = state.dataset.discrete
    rect_on = algo == "forler" and fed.rectify
    if algo == "forler" and not fed.rectify:
        loss_cfg = replace(loss_cfg, alpha_1=0.0)
    if algo == "fed_cql":
        loss_cfg = replace(loss_cfg, alpha_1=0.0, alpha_2=0.0)
    delta = cfg.rectifier.delta if algo == "forler" and not discrete else 1

    actor, critics, snapshot = state.actor, state.critics, state.snapshot
    a_opt, q1_opt, q2_opt = state.actor_opt, state.q1_opt, state.q2_opt
    cache = state.cache
    evals_before = cache.q_eval_count
    idx = None
    try:
        for tau in range(state.tau, state.tau + cfg.local_steps):
            if idx is None or tau % delta == 0:
                idx = state.dataset.sample(rng, cfg.batch_size)
            batch = state.dataset.batch(idx)
            if algo == "forler" and rect_on:
                if discrete:
                    rect = greedy_tabular_actions(critics, batch.states)
                    cache.q_eval_count += len(batch)
                else:
                    rect = periodic_rectify(cache, tau, critics, batch.states, actor, cfg.rectifier, rng)
            else:
                rect = batch.actions if not discrete else np.zeros(len(batch), dtype=np.int64)

            omega = 0.0 if algo == "fed_td3bc" else loss_cfg.omega_c
            _, (g1, g2), _ = cql_critic_loss(critics, actor, batch, loss_cfg, rng, discrete, omega=omega)
            q1, q1_opt = optimizer_step(critics.q1, q1_opt, g1)
            q2, q2_opt = optimizer_step(critics.q2, q2_opt, g2)
            critics = CriticPair(q1, q2, critics.q1_target, critics.q2_target)

            if algo == "fed_td3bc":
                _, ga, _ = td3bc_actor_loss(actor, critics, batch, loss_cfg.lambda_td3bc)
            else:
                _, ga = rectified_actor_loss(actor, critics, batch, rect, snapshot, loss_cfg, discrete)
            actor, a_opt = optimizer_step(actor, a_opt, ga)

            critics = CriticPair(q1, q2, polyak_update(critics.q1_target, q1, fed.polyak_tau),
                                 polyak_update(critics.q2_target, q2, fed.polyak_tau))
    except (NonFiniteError, FloatingPointError) as exc:
        raise DeviceAbort(state.device_id, f"round {round_index}: {exc}") from exc

    new_state = replace(state, actor=actor, critics=critics, actor_opt=a_opt, q1_opt=q1_opt, q2_opt=q2_opt,
                        cache=cache, tau=state.tau + cfg.local_steps,
                        q_evals_round=cache.q_eval_count - evals_before)
    envelopes = [ParamEnvelope(state.device_id, round_index, "critic_pair", (critics.q1, critics.q2))]
    if algo in ("fed_cql", "fed_td3bc"):
        envelopes.append(ParamEnvelope(state.device_id, round_index, "local_actor", (actor,)))
    return new_state, envelopes


# ---------------------------------------------------------------------------
# Server side


@dataclass
class ServerState:
    actor: ApproximatorParams
    log_std: np.ndarray
    ensemble: list[ApproximatorParams]
    ensemble_targets: list[ApproximatorParams]
    dataset: OfflineDataset | None
    round: int = 0
    beta_ent: float = 0.0
    omega_s: float = 0.0
    actor_opt: OptimizerState | None = None
    log_std_opt: OptimizerState | None = None
    probe_idx: np.ndarray | None = None
    rejected: list[str] = field(default_factory=list)


def make_server(actor: ApproximatorParams, heads: Sequence[ApproximatorParams], dataset, fed,
                rng: np.random.Generator, action_dim: int) -> ServerState:
    probe = None
    if dataset is not None:
        probe = rng.choice(len(dataset), size=min(fed.probe_size, len(dataset)), replace=False)
    log_std = np.full(action_dim, fed.init_log_std)
    log_std_params = ApproximatorParams((LayerSpec(1, action_dim, "identity"),),
                                        np.concatenate([np.zeros(action_dim), log_std]))
    return ServerState(actor.copy(), log_std, [h.copy() for h in heads], [h.copy() for h in heads], dataset,
                       beta_ent=fed.beta_ent, omega_s=fed.omega_s, actor_opt=make_optimizer(actor, fed.policy_lr),
                       log_std_opt=make_optimizer(log_std_params, fed.lr), probe_idx=probe)


def pessimistic_pair(server: ServerState, discrete: bool) -> tuple[ApproximatorParams, ApproximatorParams]:
    """The two heads with the lowest mean Q over the fixed probe batch of the server data."""
    if len(server.ensemble) < 2:
        raise ValueError("ensemble must hold at least two heads")
    if len(server.ensemble) == 2 or server.dataset is None:
        return server.ensemble[0], server.ensemble[1]
    batch = server.dataset.batch(server.probe_idx)
    means = []
    for h in server.ensemble:
        out = forward(h, batch.states if discrete else np.concatenate([batch.states, batch.actions], axis=1))
        if discrete:
            out = out[np.arange(len(batch)), batch.actions[:, 0].astype(np.int64)]
        means.append(float(np.mean(out)))
    order = np.argsort(means, kind="stable")
    return server.ensemble[order[0]], server.ensemble[order[1]]


def broadcast(server: ServerState, discrete: bool) -> tuple[ParamEnvelope, ParamEnvelope]:
    q1, q2 = pessimistic_pair(server, discrete)
    return (ParamEnvelope("server", server.round, "global_actor", (server.actor,)),
            ParamEnvelope("server", server.round, "global_critic", (q1, q2)))


def _valid_critic_envelope(env: ParamEnvelope, header) -> bool:
    return (env.kind == "critic_pair" and len(env.params) == 2
            and all(p.shape_header == header for p in env.params))


def server_ensemble_update(server: ServerState, envelopes: Sequence[ParamEnvelope], n_grad_steps: int,
                           rng: np.random.Generator, batch_size: int = 256, gamma: float = 0.99,
                           polyak_tau: float = 0.005, lr: float = 3e-4, stochastic: bool = False,
                           discrete: bool = False) -> ServerState:
    """Replace the ensemble by the received heads, then alternate critic/actor steps on the server data."""
    if server.dataset is None or len(server.dataset) == 0:
        raise ValueError("server dataset is empty")
    header = server.ensemble[0].shape_header
    heads, rejected = [], []
    for env in envelopes:
        if _valid_critic_envelope(env, header):
            heads.extend(p.copy() for p in env.params)
        else:
            rejected.append(str(env.sender_id))
            log.warning("rejecting envelope from %s (kind=%s)", env.sender_id, env.kind)
    if not heads:
        raise ValueError("no valid critic envelopes received")
    targets = [h.copy() for h in heads]
    opts = [make_optimizer(h, lr) for h in heads]
    actor, a_opt = server.actor, server.actor_opt
    log_std, ls_opt = server.log_std, server.log_std_opt
    n_act = log_std.shape[0]
    beta, omega = server.beta_ent, server.omega_s
    for _ in range(n_grad_steps):
        batch = server.dataset.batch(server.dataset.sample(rng, batch_size))
        y = ensemble_target(targets, actor, log_std, batch, gamma, beta, rng, stochastic, discrete)
        if discrete:
            pol = actor_output(actor, batch.states, True)
        else:
            pol, _, _ = server_policy_sample(actor, log_std, batch.states, beta, rng, stochastic)
        _, grads = ensemble_critic_loss(heads, y, batch, pol, omega, discrete)
        for i, g in enumerate(grads):
            heads[i], opts[i] = optimizer_step(heads[i], opts[i], g)
        _, ga, g_ls = server_actor_loss(actor, log_std, heads, batch, beta, rng, stochastic, discrete)
        actor, a_opt = optimizer_step(actor, a_opt, ga)
        if g_ls is not None:
            ls_params = ApproximatorParams((LayerSpec(1, n_act, "identity"),),
                                           np.concatenate([np.zeros(n_act), log_std]))
            ls_params, ls_opt = optimizer_step(ls_params, ls_opt, np.concatenate([np.zeros(n_act), g_ls]))
            log_std = np.clip(ls_params.values[n_act:], -5.0, 1.0)
        targets = [polyak_update(t, h, polyak_tau) for t, h in zip(targets, heads)]
    return replace(server, actor=actor, actor_opt=a_opt, log_std=log_std, log_std_opt=ls_opt,
                   ensemble=heads, ensemble_targets=targets, round=server.round + 1, rejected=rejected)


def fedavg_aggregate(envelopes: Sequence[ParamEnvelope], sizes: Sequence[int]) -> list[ApproximatorParams]:
    """Dataset-size weighted average of each parameter set across envelopes.

    Computed as ``p_0 + sum_k w_k (p_k - p_0)`` so identical uploads come back
    bit for bit.
    """
    if not envelopes or len(envelopes) != len(sizes):
        raise ValueError("need one dataset size per envelope")
    sizes = np.asarray(sizes, dtype=np.float64)
    if np.any(sizes <= 0):
        raise ValueError("dataset sizes must be positive")
    w = sizes / sizes.sum()
    first = envelopes[0].params
    for env in envelopes[1:]:
        if len(env.params) != len(first) or any(a.shape_header != b.shape_header
                                                for a, b in zip(env.params, first)):
            raise ValueError(f"envelope from {env.sender_id} is not shape-compatible")
    out = []
    for j, base in enumerate(first):
        acc = np.zeros_like(base.values)
        for wk, env in zip(w, envelopes):
            acc += wk * (env.params[j].values - base.values)
        out.append(base.with_values(base.values + acc))
    return out


# ---------------------------------------------------------------------------
# Orchestration


@dataclass
class RunResult:
    rows: list[dict]
    server: ServerState | None
    devices: list[DeviceState]
    global_actor: ApproximatorParams


def build_datasets(cfg: ExperimentConfig):
    env = make_env(cfg.env_id, seed=0)
    devices = [generate_dataset(env, None, d.size, d.quality, d.seed) for d in cfg.devices]
    sd = cfg.server_dataset
    server = generate_dataset(env, None, sd.size, sd.quality, sd.seed)
    return devices, server


def _rngs(seed: int, round_index: int, n_devices: int):
    ss = np.random.SeedSequence([int(seed), int(round_index)])
    children = ss.spawn(n_devices + 1)
    return [np.random.default_rng(c) for c in children[:-1]], np.random.default_rng(children[-1])


def _eval(env, actor, cfg: ExperimentConfig, seed: int) -> float:
    return evaluate_policy(env, actor, cfg.eval_episodes, seed=10_000 + int(seed))[0]


def run_federation(cfg: ExperimentConfig, seed: int, datasets=None, server_dataset=None,
                   log_path=None) -> RunResult:
    """Train ``cfg.algorithm`` for ``cfg.rounds`` rounds and return the per-round metrics rows."""
    if datasets is None:
        datasets, server_dataset = build_datasets(cfg)
    env = make_env(cfg.env_id, seed=seed)
    spec = env.spec
    discrete = spec.discrete
    fed = cfg.federation
    init_rng = np.random.default_rng(np.random.SeedSequence([int(seed), 7919]))
    actor0 = init_params(actor_header(spec, fed.hidden), init_rng)
    q1_0 = init_params(critic_header(spec, fed.hidden), init_rng, final_scale=1e-2)
    q2_0 = init_params(critic_header(spec, fed.hidden), init_rng, final_scale=1e-2)
    rows: list[dict] = []
    writer = _LogWriter(log_path) if log_path is not None else None
    t0 = time.perf_counter()

    def emit(round_index, global_return, device_id, device_return, q_evals):
        row = dict(zip(LOG_COLUMNS, (round_index, cfg.algorithm, seed, global_return, device_id,
                                     device_return, q_evals, int(1000 * (time.perf_counter() - t0)))))
        rows.append(row)
        if writer is not None:
            writer.write(row)

    if cfg.algorithm == "centralized_cql":
        result = _run_centralized(cfg, seed, datasets, env, actor0, q1_0, q2_0, emit)
        result.rows = rows
        return result

    server = make_server(actor0, (q1_0, q2_0), server_dataset if cfg.algorithm == "forler" else None,
                         fed, init_rng, spec.action_dim if not discrete else spec.n_actions)
    devices = [make_device(f"device-{k}", ds, actor0, q1_0, q2_0, fed.lr, fed.policy_lr) for k, ds in enumerate(datasets)]
    sizes = [len(ds) for ds in datasets]
    g0 = _eval(env, actor0, cfg, seed)
    for dev in devices:
        emit(0, g0, dev.device_id, g0, 0)
    global_actor = actor0
    actor_env, critic_env = broadcast(server, discrete)

    for t in range(1, cfg.rounds + 1):
        dev_rngs, server_rng = _rngs(seed, t, len(devices))
        uploads, returns = [], []
        for k, dev in enumerate(devices):
            dev = device_receive(dev, transmit(actor_env), transmit(critic_env))
            try:
                dev, envs = device_round(dev, cfg, dev_rngs[k], round_index=t)
            except DeviceAbort as exc:
                log.warning("%s; skipping device this round", exc)
                dev = replace(dev, flagged=True)
                devices[k] = dev
                returns.append(float("nan"))
                continue
            devices[k] = dev
            uploads.append((k, [transmit(e) for e in envs]))
            returns.append(_eval(env, dev.actor, cfg, seed))
        if not uploads:
            raise RuntimeError(f"round {t}: every device aborted")

        if cfg.algorithm == "forler":
            server = server_ensemble_update(
                server, [envs[0] for _, envs in uploads], fed.server_steps, server_rng,
                batch_size=fed.server_batch, gamma=cfg.loss.gamma, polyak_tau=fed.polyak_tau, lr=fed.lr,
                stochastic=fed.stochastic_server, discrete=discrete)
            actor_env, critic_env = broadcast(server, discrete)
        else:
            kept = [k for k, _ in uploads]
            critics = fedavg_aggregate([envs[0] for _, envs in uploads], [sizes[k] for k in kept])
            actor = fedavg_aggregate([envs[1] for _, envs in uploads], [sizes[k] for k in kept])[0]
            server = replace(server, actor=actor, ensemble=critics, ensemble_targets=[c.copy() for c in critics],
                             round=server.round + 1)
            actor_env = ParamEnvelope("server", t, "global_actor", (actor,))
            critic_env = ParamEnvelope("server", t, "global_critic", tuple(critics))
        global_actor = server.actor
        g = _eval(env, global_actor, cfg, seed)
        for dev, ret in zip(devices, returns):
            emit(t, g, dev.device_id, ret, dev.q_evals_round)
    return RunResult(rows, server, devices, global_actor)


def _run_centralized(cfg, seed, datasets, env, actor0, q1_0, q2_0, emit) -> RunResult:
    pooled = concat_datasets(datasets, quality="mixed", seed=seed)
    discrete = pooled.discrete
    dev = make_device("pooled", pooled, actor0, q1_0, q2_0, cfg.federation.lr,
                      cfg.federation.policy_lr)
    g0 = _eval(env, actor0, cfg, seed)
    emit(0, g0, "pooled", g0, 0)
    cql_cfg = cfg.replace(algorithm="fed_cql")
    for t in range(1, cfg.rounds + 1):
        rngs, _ = _rngs(seed, t, 1)
        dev, _ = device_round(dev, cql_cfg, rngs[0], round_index=t)
        g = _eval(env, dev.actor, cfg, seed)
        emit(t, g, "pooled", g, 0)
    return RunResult([], None, [dev], dev.actor)


# ---------------------------------------------------------------------------
# Logs and checkpoints


class _LogWriter:
    """Append-only CSV with the fixed training-log header."""

    def __init__(self, path):
        self.path = Path(path)
        new = not self.path.exists() or self.path.stat().st_size == 0
        self._fh = self.path.open("a", newline="")
        self._writer = csv.DictWriter(self._fh, fieldnames=LOG_COLUMNS)
        if new:
            self._writer.writeheader()
            self._fh.flush()

    def write(self, row: dict) -> None:
        self._writer.writerow({k: _fmt(row[k]) for k in LOG_COLUMNS})
        self._fh.flush()

    def close(self):
        self._fh.close()

    def __del__(self):
        try:
            self._fh.close()
        except Exception:
            pass


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def write_log(rows, path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt(row[k]) for k in LOG_COLUMNS})
    return path


def read_log(path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))


def save_checkpoint(result: RunResult, cfg: ExperimentConfig, seed: int, out_dir) -> Path:
    """Write envelopes for the server and every device plus a JSON manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    rnd = result.server.round if result.server is not None else cfg.rounds
    if result.server is not None:
        actor_env = ParamEnvelope("server", rnd, "global_actor", (result.server.actor,))
        critic_env = ParamEnvelope("server", rnd, "global_critic", tuple(result.server.ensemble))
        for env in (actor_env, critic_env):
            name = f"server-{env.kind}.env"
            (out / name).write_bytes(env.to_bytes())
            files.append(name)
    for dev in result.devices:
        for env in (ParamEnvelope(dev.device_id, rnd, "critic_pair", (dev.critics.q1, dev.critics.q2)),
                    ParamEnvelope(dev.device_id, rnd, "local_actor", (dev.actor,))):
            name = f"{dev.device_id}-{env.kind}.env"
            (out / name).write_bytes(env.to_bytes())
            files.append(name)
    manifest = {"round": rnd, "seed": seed, "seeds": list(cfg.seeds), "config_hash": config_hash(cfg),
                "algorithm": cfg.algorithm, "files": files}
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_checkpoint(out_dir) -> tuple[dict, dict[str, ParamEnvelope]]:
    out = Path(out_dir)
    manifest = json.loads((out / "manifest.json").read_text())
    envs = {name: ParamEnvelope.from_bytes((out / name).read_bytes()) for name in manifest["files"]}
    return manifest, envs
