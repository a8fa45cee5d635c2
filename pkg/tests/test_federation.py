import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fedgrid.env import Environment, EnvConfig, build_scenario_pool
from fedgrid.errors import DomainError, TrainingError
from fedgrid.federation import (
    Coordinator,
    FedMode,
    FedSchedule,
    TrainConfig,
    broadcast_assign,
    clip_mode_for,
    federated_average,
    train,
)
from fedgrid.grid import default_network
from fedgrid.sac import DOUBLE_MIN, SINGLE_PAIR, SacHyper, make_agents

TOY_HYPER = SacHyper(hidden=(16, 16), batch_size=32, warmup=64)
TOY_EPISODES = 13  # 520 env steps


def toy_run(mode, seed=0, on_federate=None, episodes=TOY_EPISODES):
    env = Environment(default_network(), EnvConfig(seed=seed))
    pool = build_scenario_pool(env.net, env.cfg, 7, np.random.default_rng(100 + seed))
    agents = make_agents(env.obs_dims, env.act_dims, TOY_HYPER, seed)
    cfg = TrainConfig(episodes=episodes, schedule=FedSchedule(mode=mode), hyper=TOY_HYPER, seed=seed)
    return agents, train(env, agents, cfg, pool, on_federate=on_federate)


class TestAverage:
    def test_identity(self):
        x = np.random.default_rng(0).normal(size=50)
        assert np.array_equal(federated_average([x, x.copy(), x.copy()]), x)

    def test_hand_value(self):
        assert federated_average([np.zeros(1), np.full(1, 2.0)])[0] == 1.0

    @settings(max_examples=50)
    @given(arrays(np.float64, (4, 6), elements=st.floats(-1e3, 1e3)), st.permutations(range(4)))
    def test_permutation_invariant(self, stack, perm):
        a = federated_average(list(stack))
        b = federated_average([stack[i] for i in perm])
        assert a.tobytes() == b.tobytes()

    @settings(max_examples=50)
    @given(arrays(np.float64, (3, 5), elements=st.floats(-1e3, 1e3)))
    def test_within_range(self, stack):
        avg = federated_average(list(stack))
        assert np.all(avg >= stack.min(axis=0)) and np.all(avg <= stack.max(axis=0))
        assert np.allclose(avg, stack.mean(axis=0), rtol=1e-12, atol=1e-9)

    def test_shape_mismatch(self):
        with pytest.raises(DomainError):
            federated_average([np.zeros(3), np.zeros(4)])

    def test_empty(self):
        with pytest.raises(DomainError):
            federated_average([])


class TestBroadcast:
    def setup_method(self):
        self.agents = make_agents([5, 5, 5], [1, 1, 1], SacHyper(hidden=(8,)), 3)

    def test_assigns_everywhere(self):
        crit = np.arange(self.agents[0].critics[0].n_params, dtype=float)
        broadcast_assign(self.agents, 0, crit, -crit)
        for ag in self.agents:
            assert np.array_equal(ag.critics[0].flat, crit)
            assert np.array_equal(ag.targets[0].flat, -crit)

    def test_policies_and_other_pair_untouched(self):
        before = [(ag.policy.flat.copy(), ag.critics[1].flat.copy()) for ag in self.agents]
        Coordinator().federate(self.agents, SINGLE_PAIR)
        for ag, (pol, c2) in zip(self.agents, before):
            assert np.array_equal(ag.policy.flat, pol) and np.array_equal(ag.critics[1].flat, c2)

    def test_idempotent(self):
        coord = Coordinator()
        coord.federate(self.agents, DOUBLE_MIN)
        once = [ag.critics[0].flat.copy() for ag in self.agents]
        coord.federate(self.agents, DOUBLE_MIN)
        assert all(np.array_equal(ag.critics[0].flat, x) for ag, x in zip(self.agents, once))
        assert coord.rounds == 2

    def test_registry_excludes_policy(self):
        coord = Coordinator()
        coord.collect(self.agents, DOUBLE_MIN)
        assert set(coord.registry[0]) == {"critic0", "critic1", "target0", "target1"}


class TestClipMode:
    def test_before_and_after_switch(self):
        assert clip_mode_for(400, 1000) == DOUBLE_MIN
        assert clip_mode_for(600, 1000) == SINGLE_PAIR

    def test_boundary(self):
        assert clip_mode_for(500, 1000) == SINGLE_PAIR
        assert clip_mode_for(499, 1000) == DOUBLE_MIN

    def test_out_of_range(self):
        with pytest.raises(DomainError):
            clip_mode_for(1001, 1000)


class TestSchedule:
    def test_steps(self):
        sch = FedSchedule()
        steps = [s for s in range(1, 200) if sch.is_federation_step(s)]
        assert steps == list(range(100, 200, 10))

    def test_decentralized_never(self):
        sch = FedSchedule(mode="decentralized")
        assert not any(sch.is_federation_step(s) for s in range(1000))

    def test_invalid(self):
        with pytest.raises(DomainError):
            FedSchedule(interval=0)


class TestTraining:
    def test_barriers_equalize_active_parameters(self):
        seen = []

        def check(step, agents, mode):
            for i in mode.active:
                ref_c, ref_t = agents[0].critics[i].flat, agents[0].targets[i].flat
                for ag in agents[1:]:
                    assert ag.critics[i].flat.tobytes() == ref_c.tobytes()
                    assert ag.targets[i].flat.tobytes() == ref_t.tobytes()
            seen.append((step, str(mode)))

        agents, res = toy_run(FedMode.FEDERATED, on_federate=check)
        assert res.global_step == 520
        assert res.federation_steps == list(range(100, 521, 10))
        assert [s for s, _ in seen] == res.federation_steps
        assert {m for _, m in seen} == {str(DOUBLE_MIN), str(SINGLE_PAIR)}
        assert all(not np.array_equal(agents[0].policy.flat, ag.policy.flat) for ag in agents[1:])

    def test_frozen_pair_in_single_mode(self):
        frozen = {}

        def snap(step, agents, mode):
            if mode == SINGLE_PAIR:
                frozen.setdefault("c", [ag.critics[1].flat.copy() for ag in agents])

        agents, _ = toy_run(FedMode.FEDERATED, on_federate=snap)
        assert all(np.array_equal(ag.critics[1].flat, c) for ag, c in zip(agents, frozen["c"]))

    def test_decentralized_agents_differ(self):
        agents, res = toy_run(FedMode.DECENTRALIZED)
        assert res.federation_steps == []
        for i in range(2):
            flats = [ag.critics[i].flat for ag in agents]
            assert not np.array_equal(flats[0], flats[1]) and not np.array_equal(flats[1], flats[2])

    def test_deterministic(self):
        a_agents, a = toy_run(FedMode.FEDERATED, seed=4, episodes=4)
        b_agents, b = toy_run(FedMode.FEDERATED, seed=4, episodes=4)
        assert a.rewards == b.rewards
        assert all(x.policy.flat.tobytes() == y.policy.flat.tobytes() for x, y in zip(a_agents, b_agents))

    def test_reward_matrix(self):
        _, res = toy_run(FedMode.DECENTRALIZED, episodes=2)
        R = res.reward_matrix(3)
        assert R.shape == (2, 3) and np.all(R <= 0)

    def test_agent_count_checked(self):
        env = Environment(default_network())
        agents = make_agents([9, 9], [1, 1], TOY_HYPER, 0)
        with pytest.raises(DomainError):
            train(env, agents, TrainConfig(episodes=1), [])

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_failures_are_wrapped(self):
        env = Environment(default_network())
        agents = make_agents(env.obs_dims, env.act_dims, TOY_HYPER, 0)
        pool = build_scenario_pool(env.net, env.cfg, 2, np.random.default_rng(0))
        agents[1].policy.flat[:] = np.nan
        with pytest.raises(TrainingError, match="episode 0"):
            train(env, agents, TrainConfig(episodes=1, hyper=TOY_HYPER), pool)
