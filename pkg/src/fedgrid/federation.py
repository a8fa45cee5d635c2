"""Vertically federated training loop: shared coupled environment, critic-only averaging."""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .env import AttackScenario, Environment
from .errors import DomainError, FedGridError, TrainingError
from .sac import DOUBLE_MIN, SINGLE_PAIR, Agent, ClipMode, SacHyper

log = logging.getLogger(__name__)


class FedMode(str, enum.Enum):
    FEDERATED = "federated"
    DECENTRALIZED = "decentralized"


@dataclass
class FedSchedule:
    start_step: int = 100
    interval: int = 10
    mode: FedMode = FedMode.FEDERATED

    def __post_init__(self):
        self.mode = FedMode(self.mode)
        if self.start_step < 0 or self.interval < 1:
            raise DomainError("need start_step >= 0 and interval >= 1")

    def is_federation_step(self, step: int) -> bool:
        """``step`` counts environment steps taken so far (1-based)."""
        if self.mode is not FedMode.FEDERATED or step < self.start_step:
            return False
        return (step - self.start_step) % self.interval == 0


@dataclass
class TrainConfig:
    episodes: int = 750
    schedule: FedSchedule = field(default_factory=FedSchedule)
    hyper: SacHyper = field(default_factory=SacHyper)
    clip_switch_fraction: float = 0.5
    # the half-training switch belongs to FedSAC; the decentralized baseline is plain SAC
    clip_switch_decentralized: bool = False
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.clip_switch_fraction <= 1.0:
            raise DomainError("clip_switch_fraction must lie in (0, 1]")
        if self.episodes < 1:
            raise DomainError("episodes must be >= 1")


def federated_average(snapshots: Sequence[np.ndarray]) -> np.ndarray:
    """Elementwise uniform mean of flat parameter vectors.

    Values are sorted per coordinate before summing and the mean is taken
    relative to the smallest one, so the result is exactly permutation
    invariant and exactly reproduces identical inputs.
    """
    if len(snapshots) == 0:
        raise DomainError("nothing to average")
    shape = np.shape(snapshots[0])
    if any(np.shape(s) != shape for s in snapshots):
        raise DomainError("snapshots differ in shape")
    stack = np.sort(np.stack(snapshots), axis=0)
    lo = stack[0]
    return lo + (stack - lo).sum(axis=0) / len(snapshots)


def broadcast_assign(agents: Sequence[Agent], critic_index: int, critic: np.ndarray, target: np.ndarray) -> None:
    for ag in agents:
        ag.critics[critic_index].assign(critic)
        ag.targets[critic_index].assign(target)


class Coordinator:
    """Passive aggregation point; sees critic and target-critic parameters only."""

    def __init__(self):
        self.registry: dict[int, dict[str, np.ndarray]] = {}
        self.rounds = 0

    def collect(self, agents: Sequence[Agent], mode: ClipMode) -> None:
        self.registry = {
            ag.id: {
                **{f"critic{i}": ag.critics[i].flat.copy() for i in mode.active},
                **{f"target{i}": ag.targets[i].flat.copy() for i in mode.active},
            }
            for ag in agents
        }

    def fuse(self, mode: ClipMode) -> dict[int, tuple[np.ndarray, np.ndarray]]:
        snaps = list(self.registry.values())
        return {
            i: (
                federated_average([s[f"critic{i}"] for s in snaps]),
                federated_average([s[f"target{i}"] for s in snaps]),
            )
            for i in mode.active
        }

    def federate(self, agents: Sequence[Agent], mode: ClipMode) -> None:
        self.collect(agents, mode)
        for i, (crit, tgt) in self.fuse(mode).items():
            broadcast_assign(agents, i, crit, tgt)
        self.rounds += 1


def clip_mode_for(step: int, total_steps: int, fraction: float = 0.5) -> ClipMode:
    """Clipped double-Q for the first ``fraction`` of training, then pair 1 alone."""
    if not 0 <= step <= total_steps:
        raise DomainError(f"step {step} outside [0, {total_steps}]")
    return DOUBLE_MIN if step < fraction * total_steps else SINGLE_PAIR


@dataclass
class TrainResult:
    rewards: list[tuple[int, int, float]]  # (episode, agent_id, episodic reward)
    federation_steps: list[int]
    global_step: int

    def reward_matrix(self, n_agents: int) -> np.ndarray:
        out = np.zeros((len(self.rewards) // n_agents, n_agents))
        for ep, k, r in self.rewards:
            out[ep, k] = r
        return out


def train(
    env: Environment,
    agents: Sequence[Agent],
    cfg: TrainConfig,
    pool: Sequence[AttackScenario],
    rng: np.random.Generator | None = None,
    on_federate: Callable[[int, Sequence[Agent], ClipMode], None] | None = None,
    on_episode: Callable[[int, np.ndarray], None] | None = None,
) -> TrainResult:
    """Run ``cfg.episodes`` episodes of multi-agent SAC, federating critics on schedule."""
    if len(agents) != env.n_agents:
        raise DomainError(f"{len(agents)} agents for {env.n_agents} microgrids")
    for ag, od, ad in zip(agents, env.obs_dims, env.act_dims):
        if (ag.obs_dim, ag.act_dim) != (od, ad):
            raise DomainError(f"agent {ag.id} dims {(ag.obs_dim, ag.act_dim)} do not match env {(od, ad)}")
    if not pool:
        raise DomainError("training needs a non-empty scenario pool")
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    fed = cfg.schedule.mode is FedMode.FEDERATED
    switch = fed or cfg.clip_switch_decentralized
    total = cfg.episodes * env.cfg.episode_len
    coord = Coordinator()
    rewards, fed_steps = [], []
    step = 0
    ep = 0
    try:
        for ep in range(cfg.episodes):
            obs = env.reset(pool[int(rng.integers(len(pool)))])
            ep_ret = np.zeros(len(agents))
            done = False
            while not done:
                acts = [ag.act(o) for ag, o in zip(agents, obs)]
                nxt, r, d = env.step(acts)
                for k, ag in enumerate(agents):
                    ag.store(obs[k], acts[k], r[k], nxt[k], d[k])
                ep_ret += r
                obs = nxt
                done = bool(np.all(d))
                step += 1
                mode = clip_mode_for(step, total, cfg.clip_switch_fraction) if switch else DOUBLE_MIN
                if step >= cfg.hyper.warmup:
                    for ag in agents:
                        ag.update(mode)
                if fed and cfg.schedule.is_federation_step(step):
                    coord.federate(agents, mode)
                    fed_steps.append(step)
                    if on_federate is not None:
                        on_federate(step, agents, mode)
            rewards.extend((ep, k, float(ep_ret[k])) for k in range(len(agents)))
            if on_episode is not None:
                on_episode(ep, ep_ret)
    except FedGridError as exc:
        raise TrainingError(f"training aborted at episode {ep}, env step {step}: {exc}") from exc
    return TrainResult(rewards, fed_steps, step)
