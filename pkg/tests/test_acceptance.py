"""End-to-end acceptance checks at their stated tolerances.

Criteria 6 and 7 train three seeds in each mode at the default budget
(about 30k environment steps per run), so this module takes roughly half an
hour. A summary line per criterion is printed at the end of the session.
"""

import math
import time

import numpy as np
import pytest
from scipy import integrate

from fedgrid.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from fedgrid.cli import main
from fedgrid.config import load_config
from fedgrid.env import EnvConfig, Environment, build_scenario_pool
from fedgrid.federation import (
    Coordinator,
    FedMode,
    FedSchedule,
    TrainConfig,
    federated_average,
    train,
)
from fedgrid.grid import (
    compute_steady_state,
    default_network,
    nominal_setpoints,
    solve_targets,
    steady_state,
    step_dynamics,
)
from fedgrid.nn import squashed_logprob
from fedgrid.runner import final_fraction_means, rollout, deterministic_policy, run_training, zero_policy
from fedgrid.sac import DOUBLE_MIN, SacHyper, make_agents


def detail(record, msg):
    record("detail", msg)


@pytest.mark.criterion(1, "analytic gradients match finite differences")
def test_gradient_correctness(record_property, capsys):
    t0 = time.perf_counter()
    code = main(["gradcheck", "--n-nets", "20"])
    elapsed = time.perf_counter() - t0
    out = capsys.readouterr().out
    errs = [float(line.split("err")[1].split()[0]) for line in out.splitlines()]
    detail(record_property, f"max rel err {max(errs):.1e}, {elapsed:.1f} s")
    assert code == 0 and len(errs) == 3
    assert max(errs) < 1e-4
    assert elapsed < 60


@pytest.mark.criterion(2, "squashed-Gaussian density integrates to one")
def test_density_normalization(record_property):
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(10):
        mu, log_std = rng.uniform(-1.5, 1.5), rng.uniform(-1.5, 0.7)
        dens = lambda a: math.exp(squashed_logprob(np.array([a]), np.array([mu]), np.array([log_std])))
        total, _ = integrate.quad(dens, -1, 1, limit=400, points=[math.tanh(mu)])
        worst = max(worst, abs(total - 1.0))
    detail(record_property, f"worst |integral - 1| = {worst:.1e}")
    assert worst < 1e-3


@pytest.mark.criterion(3, "simulator fidelity")
def test_simulator_fidelity(record_property):
    net = default_network()
    env = Environment(net)
    env.reset(attack=False)
    worst = 0.0
    while not env.done:
        env.step([np.zeros(1)] * 3)
        worst = max(worst, float(np.max(np.abs(env.state.V - env.v_ss))))
    assert worst < 1e-6

    sp = nominal_setpoints(net)
    ss = steady_state(net, sp)
    nxt = step_dynamics(ss, sp, net, 0.25)
    fp = float(np.max(np.abs(nxt.V - compute_steady_state(net, sp))))
    assert fp <= 1e-8

    rng = np.random.default_rng(3)
    v = rng.uniform(0.9, 1.1, net.n_buses)
    G, d = net.sensitivity, net.load_offset
    dense = [sum(G[i, j] * v[j] for j in range(net.n_buses)) - d[i] for i in range(net.n_buses)]
    mv = float(np.max(np.abs(solve_targets(net, v, 1.0) - dense)))
    assert mv < 1e-12
    detail(record_property, f"quiet drift {worst:.1e}, fixed-point residual {fp:.1e}, mat-vec {mv:.1e}")


@pytest.mark.criterion(4, "every training attack leaves the band within 5 steps")
def test_attack_non_vacuity(record_property):
    cfg = load_config(None)
    pool, _ = cfg.pools(n_test=0)
    env = Environment(cfg.network, cfg.env)
    assert len(pool) == 7
    delays = []
    for sc in pool:
        env.reset(sc)
        buses = env.obs_buses[cfg.network.inverters[sc.inverter_id].mg_id]
        first = None
        while not env.done:
            env.step([np.zeros(1)] * 3)
            V, ref = env.state.V[buses], env.v_ss[buses]
            out = np.any((V < cfg.env.band_lo * ref) | (V > cfg.env.band_hi * ref))
            if out and first is None and env.state.t > sc.t_a:
                first = env.state.t - sc.t_a
        delays.append(first)
    detail(record_property, f"steps to exit after onset: {delays}")
    assert all(d is not None and d <= 5 for d in delays)


@pytest.mark.criterion(5, "federation semantics")
def test_federation_semantics(record_property):
    snaps = [np.random.default_rng(k).normal(size=40) for k in range(3)]
    assert np.array_equal(federated_average([snaps[0]] * 3), snaps[0])
    assert federated_average(snaps).tobytes() == federated_average(snaps[::-1]).tobytes()
    assert federated_average(snaps).tobytes() == federated_average([snaps[1], snaps[2], snaps[0]]).tobytes()

    hyper = SacHyper(hidden=(16, 16), batch_size=32, warmup=50)
    env_cfg = EnvConfig(episode_len=25)
    barriers = []

    def check(step, agents, mode):
        for i in mode.active:
            for ag in agents[1:]:
                assert ag.critics[i].flat.tobytes() == agents[0].critics[i].flat.tobytes()
                assert ag.targets[i].flat.tobytes() == agents[0].targets[i].flat.tobytes()
        barriers.append(step)

    runs = {}
    for mode in FedMode:
        env = Environment(default_network(), env_cfg)
        pool = build_scenario_pool(env.net, env_cfg, 7, np.random.default_rng(5))
        agents = make_agents(env.obs_dims, env.act_dims, hyper, 11)
        cfg = TrainConfig(episodes=20, schedule=FedSchedule(mode=mode), hyper=hyper, seed=11)
        res = train(env, agents, cfg, pool, on_federate=check)
        assert res.global_step == 500
        runs[mode] = (agents, res)

    fed_steps = runs[FedMode.FEDERATED][1].federation_steps
    assert fed_steps == barriers == list(range(100, 501, 10))
    dec_agents, dec_res = runs[FedMode.DECENTRALIZED]
    assert dec_res.federation_steps == []
    for i in range(2):
        flats = [ag.critics[i].flat.tobytes() for ag in dec_agents]
        assert len(set(flats)) == 3
    detail(record_property, f"{len(barriers)} barriers checked over 500 steps")


@pytest.fixture(scope="session")
def trained_runs(tmp_path_factory):
    """Three seeds of each mode at the default budget."""
    cfg = load_config(None)
    out = tmp_path_factory.mktemp("runs")
    cfg.plots = False
    runs = {}
    t0 = time.perf_counter()
    for mode in ("federated", "decentralized"):
        for seed in cfg.seeds:
            runs[mode, seed] = run_training(cfg, mode, seed, out)
    return cfg, runs, time.perf_counter() - t0


@pytest.mark.criterion(6, "FedSAC outperforms decentralized SAC at the end of training")
def test_fedsac_beats_decentralized(trained_runs, record_property):
    cfg, runs, elapsed = trained_runs
    final = {}
    for mode in ("federated", "decentralized"):
        per_seed = [final_fraction_means(runs[mode, s].result.reward_matrix(3)) for s in cfg.seeds]
        final[mode] = np.mean(per_seed, axis=0)
    fed, dec = final["federated"], final["decentralized"]
    wins = int(np.sum(fed >= dec))
    detail(record_property, f"fed {np.round(fed, 3).tolist()} vs dec {np.round(dec, 3).tolist()}, "
                            f"{wins}/3 agents, {elapsed / 60:.0f} min for 6 runs")
    assert runs["federated", cfg.seeds[0]].result.global_step == cfg.train.episodes * cfg.env.episode_len
    assert wins >= 2
    assert fed.mean() > dec.mean()


@pytest.mark.criterion(7, "trained FedSAC recovers held-out attacks")
def test_recovery_success(trained_runs, record_property):
    cfg, runs, _ = trained_runs
    _, test = cfg.pools()
    assert len(test) == 200
    env = Environment(cfg.network, cfg.env)
    agents = runs["federated", cfg.seeds[0]].agents
    ag = [rollout(env, deterministic_policy(agents), sc) for sc in test]
    base = [rollout(env, zero_policy(env), sc) for sc in test]
    recovered = float(np.mean([r.recovered for r in ag]))
    median = float(np.median([r.rewards.sum() for r in ag]))
    base_median = float(np.median([r.rewards.sum() for r in base]))
    detail(record_property, f"recovered {recovered:.1%}, median {median:.2f} vs baseline {base_median:.2f}")
    assert recovered >= 0.60
    assert median > base_median


@pytest.mark.criterion(8, "determinism and checkpoint persistence")
def test_determinism_and_persistence(tmp_path, record_property):
    cfg = load_config(None)
    cfg.plots = False
    a = run_training(cfg, "federated", 3, tmp_path / "a", episodes=10)
    b = run_training(cfg, "federated", 3, tmp_path / "b", episodes=10)
    assert a.rewards_csv.read_bytes() == b.rewards_csv.read_bytes()

    loaded = load_checkpoint(a.checkpoint).build_agents()
    probes = np.random.default_rng(8).normal(1.0, 0.02, (64, 9))
    for old, new in zip(a.agents, loaded):
        assert old.act(probes, deterministic=True).tobytes() == new.act(probes, deterministic=True).tobytes()
        for x, y in zip(old.critics + old.targets, new.critics + new.targets):
            assert x.flat.tobytes() == y.flat.tobytes()
    resaved = tmp_path / "again.fgck"
    save_checkpoint(load_checkpoint(a.checkpoint), resaved)
    assert resaved.read_bytes() == a.checkpoint.read_bytes()
    detail(record_property, "reward CSVs byte-identical, checkpoint round-trip exact")
