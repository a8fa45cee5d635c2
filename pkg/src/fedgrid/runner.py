"""Train / evaluate / simulate drivers that turn a config into CSV, checkpoint and PNG artifacts."""

from __future__ import annotations

import csv
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import ExperimentConfig
from .env import AttackScenario, Environment
from .errors import CheckpointError, DomainError
from .federation import FedMode, TrainResult, train
from .sac import Agent, make_agents

log = logging.getLogger(__name__)

REWARD_COLUMNS = ["episode", "agent_id", "reward", "seed", "mode"]
TRACE_COLUMNS = ["scenario", "policy", "t", "bus", "phase", "V", "V_ss"]

Policy = Callable[[list[np.ndarray]], list[np.ndarray]]


def run_name(mode: str, seed: int) -> str:
    return f"{FedMode(mode).value}_seed{seed}"


def _fmt(x: float) -> str:
    return repr(float(x))


def write_rewards_csv(path: Path, result: TrainResult, seed: int, mode: str) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REWARD_COLUMNS)
        for ep, k, r in result.rewards:
            w.writerow([ep, k, _fmt(r), seed, mode])


def read_rewards_csv(path: Path) -> tuple[np.ndarray, int, str]:
    """Episode-by-agent reward matrix plus the seed and mode recorded in the file."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise DomainError(f"{path}: no reward rows")
    n_ep = max(int(r["episode"]) for r in rows) + 1
    n_ag = max(int(r["agent_id"]) for r in rows) + 1
    R = np.full((n_ep, n_ag), np.nan)
    for r in rows:
        R[int(r["episode"]), int(r["agent_id"])] = float(r["reward"])
    return R, int(rows[0]["seed"]), rows[0]["mode"]


def build_env(cfg: ExperimentConfig, seed: int = 0) -> Environment:
    return Environment(cfg.network, replace(cfg.env, seed=seed))


@dataclass
class TrainOutput:
    result: TrainResult
    agents: list[Agent]
    rewards_csv: Path
    checkpoint: Path
    figure: Path | None


def run_training(cfg: ExperimentConfig, mode: str, seed: int, out_dir: Path | None = None,
                 episodes: int | None = None) -> TrainOutput:
    out_dir = Path(out_dir or cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    mode = FedMode(mode).value
    tcfg = cfg.for_seed(seed, mode)
    if episodes is not None:
        tcfg = replace(tcfg, episodes=episodes)
    env = build_env(cfg, seed)
    pool, _ = cfg.pools(n_test=0)
    agents = make_agents(env.obs_dims, env.act_dims, tcfg.hyper, seed)

    def progress(ep, ret):
        if (ep + 1) % 50 == 0:
            log.info("%s seed %d: episode %d/%d, rewards %s", mode, seed, ep + 1, tcfg.episodes, np.round(ret, 3))

    result = train(env, agents, tcfg, pool, on_episode=progress)
    name = run_name(mode, seed)
    csv_path = out_dir / f"rewards_{name}.csv"
    write_rewards_csv(csv_path, result, seed, mode)
    ckpt_path = out_dir / f"checkpoint_{name}.fgck"
    echo = dict(cfg.echo(), mode=mode, seed=seed, episodes=tcfg.episodes)
    save_checkpoint(Checkpoint.capture(agents, result.global_step, echo), ckpt_path)
    fig = None
    if cfg.plots:
        from .plotting import plot_training_rewards

        fig = plot_training_rewards(result.reward_matrix(len(agents)), out_dir / f"rewards_{name}.png",
                                    title=f"{mode}, seed {seed}")
    return TrainOutput(result, agents, csv_path, ckpt_path, fig)


def load_agents(path: Path, cfg: ExperimentConfig) -> list[Agent]:
    """Rebuild agents from a checkpoint, refusing one trained for a different network shape."""
    ckpt = load_checkpoint(path)
    env = build_env(cfg)
    if len(ckpt.agents) != env.n_agents:
        raise CheckpointError(f"{path}: {len(ckpt.agents)} agents, config has {env.n_agents} microgrids")
    for b, od, ad in zip(ckpt.agents, env.obs_dims, env.act_dims):
        if (b.obs_dim, b.act_dim) != (od, ad):
            raise CheckpointError(f"{path}: agent {b.agent_id} has dims {(b.obs_dim, b.act_dim)}, "
                                  f"config expects {(od, ad)}")
    return ckpt.build_agents()


def deterministic_policy(agents: Sequence[Agent]) -> Policy:
    return lambda obs: [ag.act(o, deterministic=True) for ag, o in zip(agents, obs)]


def zero_policy(env: Environment) -> Policy:
    return lambda obs: [np.zeros(d) for d in env.act_dims]


@dataclass
class Rollout:
    rewards: np.ndarray  # per-agent episodic reward
    recovered: bool
    V: np.ndarray  # (T, M, phases), post-step voltages


def rollout(env: Environment, policy: Policy, scenario: AttackScenario | None) -> Rollout:
    obs = env.reset(scenario, attack=scenario is not None)
    total = np.zeros(env.n_agents)
    V = []
    while not env.done:
        obs, r, _ = env.step(policy(obs))
        total += r
        V.append(env.state.V.copy())
    return Rollout(total, env.in_band(), np.stack(V))


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("FEDGRID_THREADS", "1")))
    except ValueError:
        return 1


def _rollout_chunk(cfg, agents, scenarios):
    env = build_env(cfg)
    pol, base = deterministic_policy(agents), zero_policy(env)
    return [(rollout(env, pol, sc), rollout(env, base, sc)) for sc in scenarios]


@dataclass
class EvalSummary:
    n: int
    mean: float
    median: float
    recovered: float
    base_mean: float
    base_median: float
    base_recovered: float


def summarize(rewards: np.ndarray, recovered: np.ndarray, base_rewards: np.ndarray, base_recovered: np.ndarray):
    return EvalSummary(len(rewards), float(np.mean(rewards)), float(np.median(rewards)), float(np.mean(recovered)),
                       float(np.mean(base_rewards)), float(np.median(base_rewards)), float(np.mean(base_recovered)))


def run_evaluation(cfg: ExperimentConfig, agents: Sequence[Agent], n_scenarios: int | None = None,
                   out_dir: Path | None = None, prefix: str = "eval") -> EvalSummary:
    """Deterministic policy against the zero-action baseline on the held-out pool."""
    out_dir = Path(out_dir or cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    _, test = cfg.pools(n_test=n_scenarios)
    n_workers = min(_threads(), len(test))
    chunks = [test[i::n_workers] for i in range(n_workers)]
    # policies are read-only here, but each worker gets its own copies to be safe
    worker_agents = [agents] + [[_clone(a) for a in agents] for _ in range(n_workers - 1)]
    with ThreadPoolExecutor(n_workers) as pool:
        parts = list(pool.map(lambda a: _rollout_chunk(cfg, *a), zip(worker_agents, chunks)))
    results = [None] * len(test)
    for w, part in enumerate(parts):
        for j, res in enumerate(part):
            results[w + j * n_workers] = res
    env = build_env(cfg)

    with open(out_dir / f"{prefix}_scenarios.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["scenario", "inverter_id", "channel", "magnitude", "t_a", "reward", "recovered",
                    *[f"reward_agent{k}" for k in range(env.n_agents)], "baseline_reward", "baseline_recovered"])
        for i, (sc, (ag, base)) in enumerate(zip(test, results)):
            w.writerow([i, sc.inverter_id, sc.channel.value, _fmt(sc.magnitude), sc.t_a, _fmt(ag.rewards.sum()),
                        int(ag.recovered), *map(_fmt, ag.rewards), _fmt(base.rewards.sum()), int(base.recovered)])
    with open(out_dir / f"{prefix}_traces.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_COLUMNS)
        for i, (ag, base) in enumerate(results):
            for label, ro in (("agent", ag), ("baseline", base)):
                _write_trace_rows(w, ro.V, env.v_ss, [i, label])

    rew = np.array([a.rewards.sum() for a, _ in results])
    rec = np.array([a.recovered for a, _ in results])
    brew = np.array([b.rewards.sum() for _, b in results])
    brec = np.array([b.recovered for _, b in results])
    summary = summarize(rew, rec, brew, brec)
    with open(out_dir / f"{prefix}_summary.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["policy", "n", "mean", "median", "fraction_recovered"])
        w.writerow(["agent", summary.n, _fmt(summary.mean), _fmt(summary.median), _fmt(summary.recovered)])
        w.writerow(["baseline", summary.n, _fmt(summary.base_mean), _fmt(summary.base_median),
                    _fmt(summary.base_recovered)])

    if cfg.plots:
        from .plotting import plot_reward_histogram, plot_voltage_traces

        plot_reward_histogram({"resilient controller": rew, "no controller": brew}, out_dir / f"{prefix}_histogram.png")
        i = int(np.argmax([abs(sc.magnitude) for sc in test]))
        t = np.arange(1, cfg.env.episode_len + 1)
        plot_voltage_traces(t, {"resilient controller": results[i][0].V, "no controller": results[i][1].V},
                            env.v_ss, cfg.trace_buses, out_dir / f"{prefix}_voltages.png",
                            (cfg.env.band_lo, cfg.env.band_hi), test[i].t_a)
    return summary


def _clone(ag: Agent) -> Agent:
    c = Agent(ag.id, ag.obs_dim, ag.act_dim, ag.hyper, seed=0)
    c.policy.assign(ag.policy.flat)
    return c


def _write_trace_rows(w, V: np.ndarray, v_ss: np.ndarray, lead: list) -> None:
    T, M, P = V.shape
    for t in range(T):
        for b in range(M):
            for p in range(P):
                w.writerow([*lead, t + 1, b, p, _fmt(V[t, b, p]), _fmt(v_ss[b, p])])


def run_simulation(cfg: ExperimentConfig, scenario: AttackScenario | None, agents: Sequence[Agent] | None,
                   out_path: Path) -> Rollout:
    """One episode with the given agents, or with zero residual actions when ``agents`` is None."""
    env = build_env(cfg)
    policy = zero_policy(env) if agents is None else deterministic_policy(agents)
    ro = rollout(env, policy, scenario)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with open(out_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "bus", "phase", "V", "V_ss"])
        _write_trace_rows(w, ro.V, env.v_ss, [])
    if cfg.plots:
        from .plotting import plot_voltage_traces

        label = "no controller" if agents is None else "resilient controller"
        plot_voltage_traces(np.arange(1, len(ro.V) + 1), {label: ro.V}, env.v_ss, cfg.trace_buses,
                            out_path.with_suffix(".png"), (cfg.env.band_lo, cfg.env.band_hi),
                            None if scenario is None else scenario.t_a)
    return ro


def final_fraction_means(R: np.ndarray, fraction: float = 0.1) -> np.ndarray:
    n = max(1, int(round(fraction * len(R))))
    return R[-n:].mean(axis=0)


def run_report(out_dir: Path, plots: bool = True) -> Path:
    """Compare every ``rewards_*.csv`` in ``out_dir`` by mode: per-agent final-10% means."""
    out_dir = Path(out_dir)
    curves: dict[str, list[np.ndarray]] = {}
    for path in sorted(out_dir.glob("rewards_*.csv")):
        R, _, mode = read_rewards_csv(path)
        curves.setdefault(mode, []).append(R)
    if not curves:
        raise DomainError(f"{out_dir}: no rewards_*.csv files to report on")
    out = out_dir / "comparison.csv"
    with open(out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["mode", "agent_id", "n_seeds", "final_mean"])
        for mode, Rs in sorted(curves.items()):
            means = np.mean([final_fraction_means(R) for R in Rs], axis=0)
            for k, m in enumerate(means):
                w.writerow([mode, k, len(Rs), _fmt(m)])
            w.writerow([mode, "all", len(Rs), _fmt(means.mean())])
    if plots:
        from .plotting import plot_mode_comparison

        lengths = {len(R) for Rs in curves.values() for R in Rs}
        if len(lengths) == 1:
            plot_mode_comparison({m: np.stack(Rs) for m, Rs in sorted(curves.items())}, out_dir / "comparison.png")
    return out
