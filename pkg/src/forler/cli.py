"""Command line harness: ``gen-data``, ``train``, ``ablate`` and ``verify``.

Exit codes: 0 on success, 1 for configuration or usage errors, 2 for runtime
failures.  ``FORLER_THREADS`` caps how many seeds or ablation arms run at once.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from .approximator import forward
from .config import ConfigError, DatasetSpec, ExperimentConfig, effective_config_json, load_config, \
    pollution_config
from .envs import concat_datasets, generate_dataset, load_dataset, make_env, save_dataset
from .federation import run_federation, save_checkpoint
from .verify import TabularPolicy, bound_grid, check_theorem1, empirical_behavior, empirical_mdp

log = logging.getLogger("forler")

STUDIES = ("delta_sweep", "rectification_onoff", "pollution", "alpha_grid", "device_count")
DELTAS = (1, 2, 5, 10, 20)
ALPHA_1_GRID = (0.1, 1.0, 10.0)
ALPHA_2_GRID = (0.01, 0.1, 1.0)
DEVICE_COUNTS = (2, 4, 6)
SUMMARY_COLUMNS = ("study", "arm", "n_seeds", "mean_final_return", "std_final_return", "q_evals_total",
                   "final_returns")
DEVICE_COLUMNS = ("study", "arm", "seed", "device_id", "final_device_return", "final_global_return")


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def dataset_filename(env_id: str, spec: DatasetSpec) -> str:
    return f"{env_id}-{spec.quality}-{spec.seed}.ford"


def _max_workers() -> int:
    raw = os.environ.get("FORLER_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"FORLER_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError("FORLER_THREADS must be >= 1")
    return n


def _map(fn, jobs):
    """Run jobs in order, in a process pool when more than one worker is allowed."""
    workers = min(_max_workers(), len(jobs))
    if workers <= 1:
        return [fn(*job) for job in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, *zip(*jobs)))


def _write_effective(cfg: ExperimentConfig, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "effective_config.json").write_text(effective_config_json(cfg))


def _all_specs(cfg: ExperimentConfig):
    return list(cfg.devices) + [cfg.server_dataset]


def _datasets(cfg: ExperimentConfig, data_dir: Path | None):
    """Load ``.ford`` files from ``data_dir`` when present, otherwise generate them."""
    env = make_env(cfg.env_id, seed=0)
    out = []
    for spec in _all_specs(cfg):
        path = data_dir / dataset_filename(cfg.env_id, spec) if data_dir is not None else None
        if path is not None and path.exists():
            ds = load_dataset(path)
            if len(ds) != spec.size or ds.quality != spec.quality or ds.env_id != cfg.env_id:
                raise ConfigError(f"{path} does not match the configured dataset {spec}")
        else:
            ds = generate_dataset(env, None, spec.size, spec.quality, spec.seed)
        out.append(ds)
    return out[:-1], out[-1]


# ---------------------------------------------------------------------------
# gen-data


def cmd_gen_data(cfg: ExperimentConfig, out: Path) -> list[Path]:
    _write_effective(cfg, out)
    env = make_env(cfg.env_id, seed=0)
    written: dict[str, DatasetSpec] = {}
    paths = []
    for spec in _all_specs(cfg):
        name = dataset_filename(cfg.env_id, spec)
        if name in written:
            if written[name] != spec:
                raise ConfigError(f"two datasets map to {name} with different sizes")
            continue
        written[name] = spec
        paths.append(save_dataset(generate_dataset(env, None, spec.size, spec.quality, spec.seed), out / name))
    return paths


# ---------------------------------------------------------------------------
# train


def _train_one(cfg: ExperimentConfig, seed: int, run_dir: str, data_dir: str | None) -> dict:
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    log_path = run_dir / "log.csv"
    if log_path.exists():
        log_path.unlink()
    devices, server = _datasets(cfg, Path(data_dir) if data_dir else None)
    result = run_federation(cfg, seed, devices, server, log_path=log_path)
    save_checkpoint(result, cfg, seed, run_dir / "checkpoint")
    last = max(r["round"] for r in result.rows)
    final = [r for r in result.rows if r["round"] == last]
    return {"seed": seed, "final_global_return": final[0]["global_return"],
            "device_returns": {r["device_id"]: r["device_return"] for r in final},
            "q_evals": sum(r["q_evals"] for r in result.rows)}


def cmd_train(cfg: ExperimentConfig, out: Path, data_dir: Path | None = None) -> list[dict]:
    _write_effective(cfg, out)
    jobs = [(cfg, s, str(out / f"seed-{s}"), str(data_dir) if data_dir else None) for s in cfg.seeds]
    return _map(_train_one, jobs)


# ---------------------------------------------------------------------------
# ablate


def study_arms(study: str, cfg: ExperimentConfig) -> list[tuple[str, ExperimentConfig]]:
    """The paired configurations each ablation study compares."""
    if study == "delta_sweep":
        return [(f"delta={d}", cfg.replace(algorithm="forler", rectifier=replace(cfg.rectifier, delta=d)))
                for d in DELTAS]
    if study == "rectification_onoff":
        return [(f"rectify={'on' if flag else 'off'}",
                 cfg.replace(algorithm="forler", federation=replace(cfg.federation, rectify=flag)))
                for flag in (True, False)]
    if study == "pollution":
        devices = pollution_config().devices
        base = cfg.replace(devices=tuple(replace(d, size=cfg.devices[0].size) for d in devices))
        algos = ("forler", "fed_cql") + (("fed_td3bc",) if not make_env(cfg.env_id).spec.discrete else ())
        return [(f"algorithm={a}", base.replace(algorithm=a)) for a in algos]
    if study == "alpha_grid":
        return [(f"alpha_1={a1},alpha_2={a2}",
                 cfg.replace(algorithm="forler", loss=replace(cfg.loss, alpha_1=a1, alpha_2=a2)))
                for a1 in ALPHA_1_GRID for a2 in ALPHA_2_GRID]
    if study == "device_count":
        arms = []
        for k in DEVICE_COUNTS:
            # cycle through the configured datasets, shifting seeds on each pass
            n = len(cfg.devices)
            devs = tuple(replace(cfg.devices[i % n], seed=cfg.devices[i % n].seed + 100 * (i // n))
                         for i in range(k))
            arms.append((f"devices={k}", cfg.replace(devices=devs)))
        return arms
    raise ConfigError(f"unknown study {study!r}; expected one of {STUDIES}")


def cmd_ablate(study: str, cfg: ExperimentConfig, out: Path) -> list[dict]:
    arms = study_arms(study, cfg)
    out.mkdir(parents=True, exist_ok=True)
    jobs = []
    for name, arm_cfg in arms:
        arm_dir = out / name.replace("=", "-").replace(",", "_")
        _write_effective(arm_cfg, arm_dir)
        jobs.extend((arm_cfg, s, str(arm_dir / f"seed-{s}"), None) for s in arm_cfg.seeds)
    results = _map(_train_one, jobs)
    summary, per_device = [], []
    i = 0
    for name, arm_cfg in arms:
        res = results[i:i + len(arm_cfg.seeds)]
        i += len(arm_cfg.seeds)
        finals = np.array([r["final_global_return"] for r in res], dtype=np.float64)
        summary.append({"study": study, "arm": name, "n_seeds": len(res),
                        "mean_final_return": float(np.mean(finals)), "std_final_return": float(np.std(finals)),
                        "q_evals_total": int(sum(r["q_evals"] for r in res)),
                        "final_returns": ";".join(repr(float(f)) for f in finals)})
        for r in res:
            for dev, ret in r["device_returns"].items():
                per_device.append({"study": study, "arm": name, "seed": r["seed"], "device_id": dev,
                                   "final_device_return": ret, "final_global_return": r["final_global_return"]})
    _write_csv(out / "summary.csv", SUMMARY_COLUMNS, summary)
    _write_csv(out / "per_device.csv", DEVICE_COLUMNS, per_device)
    return summary


def _write_csv(path: Path, columns, rows) -> None:
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


# ---------------------------------------------------------------------------
# verify


def greedy_tabular_policy(actor, n_states: int, n_actions: int) -> TabularPolicy:
    logits = forward(actor, np.eye(n_states))
    return TabularPolicy.deterministic(np.argmax(logits, axis=1), n_actions)


def verify_records(cfg: ExperimentConfig, seed: int, alphas, etas) -> list[tuple[dict, object]]:
    """Bound reports for the learned global and local policies, plus the sanity cells."""
    env = make_env(cfg.env_id, seed=seed)
    if not env.spec.discrete:
        raise ConfigError(f"verify needs a tabular environment, got {cfg.env_id}")
    mdp = env.mdp
    S, A = mdp.n_states, mdp.n_actions
    devices, server = _datasets(cfg, None)
    result = run_federation(cfg, seed, devices, server)
    records = []
    # identical policies and degenerate coefficients
    det = TabularPolicy.deterministic(np.argmax(mdp.reward_table, axis=1), A)
    records.append(({"seed": seed, "cell": "identical", "policy": "reward-greedy"},
                    check_theorem1(mdp, det, det, alpha=1.0, eta=0.5)))
    pooled = concat_datasets(devices, seed=seed)
    beta = empirical_behavior(pooled, S, A)
    pi_g = greedy_tabular_policy(result.global_actor, S, A)
    records.append(({"seed": seed, "cell": "degenerate", "policy": "global"},
                    check_theorem1(mdp, pi_g, beta, alpha=0.0, eta=1e-9)))
    targets = [("global", pi_g, beta, empirical_mdp(pooled, mdp))]
    for dev, ds in zip(result.devices, devices):
        targets.append((dev.device_id, greedy_tabular_policy(dev.actor, S, A), empirical_behavior(ds, S, A),
                        empirical_mdp(ds, mdp)))
    for name, pi, b, emp in targets:
        for rep in bound_grid(mdp, pi, b, alphas, etas, empirical=emp):
            records.append(({"seed": seed, "cell": "grid", "policy": name}, rep))
    return records


def format_bound_table(records) -> str:
    blocks = []
    for meta, rep in records:
        head = "".join(f"{k}={v}\n" for k, v in meta.items())
        blocks.append(head + f"consistent={rep.consistent()}\n" + rep.to_text())
    return "\n".join(blocks)


def cmd_verify(cfg: ExperimentConfig, out: Path, alphas, etas) -> list:
    _write_effective(cfg, out)
    records = []
    for seed in cfg.seeds:
        records.extend(verify_records(cfg, seed, alphas, etas))
    (out / "bound_reports.txt").write_text(format_bound_table(records))
    return records


# ---------------------------------------------------------------------------
# entry point


def _csv_floats(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise _UsageError(f"expected a comma separated list of numbers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="forler", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in ("gen-data", "train", "ablate", "verify"):
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, help="JSON experiment config")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--seeds", default=None, help="comma separated seeds overriding the config")
        if name == "train":
            sp.add_argument("--data", default=None, help="directory with .ford files from gen-data")
        if name == "ablate":
            sp.add_argument("--study", required=True, choices=STUDIES)
        if name == "verify":
            sp.add_argument("--alphas", default="0.1,1")
            sp.add_argument("--etas", default="0.1,0.5")
    return p


def _load(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    if args.seeds:
        try:
            seeds = tuple(int(s) for s in args.seeds.split(",") if s.strip())
        except ValueError:
            raise ConfigError(f"--seeds must be comma separated integers, got {args.seeds!r}") from None
        cfg = cfg.replace(seeds=seeds)
    return cfg


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
        cfg = _load(args)
        out = Path(args.out)
        if args.command == "verify":
            alphas, etas = _csv_floats(args.alphas), _csv_floats(args.etas)
            if not alphas or not etas or any(not 0 < e < 1 for e in etas):
                raise ConfigError("alphas must be non-empty and every eta must lie in (0, 1)")
    except (_UsageError, ConfigError) as exc:
        print(f"forler: error: {exc}", file=sys.stderr)
        return 1
    try:
        if args.command == "gen-data":
            for path in cmd_gen_data(cfg, out):
                print(path)
        elif args.command == "train":
            for r in cmd_train(cfg, out, Path(args.data) if args.data else None):
                print(f"seed={r['seed']} final_global_return={r['final_global_return']:.3f}")
        elif args.command == "ablate":
            for row in cmd_ablate(args.study, cfg, out):
                print(f"{row['arm']}: {row['mean_final_return']:.3f} +- {row['std_final_return']:.3f} "
                      f"q_evals={row['q_evals_total']}")
        else:
            records = cmd_verify(cfg, out, alphas, etas)
            print(f"{'seed':>4} {'policy':>13} {'alpha':>6} {'eta':>6} {'lhs':>10} {'rhs':>10} holds")
            for meta, rep in records:
                print(f"{meta['seed']:>4} {meta['policy']:>13} {rep.alpha:>6g} {rep.eta:>6g} "
                      f"{rep.lhs:>10.4f} {rep.rhs:>10.4f} {rep.holds}")
    except ConfigError as exc:
        print(f"forler: config error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"forler: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # any module hard error
        log.exception("run failed")
        print(f"forler: runtime error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
