"""Episodic multi-agent environment: attack injection, normalized observations, per-agent rewards."""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DomainError, ProtocolError
from .grid import (
    DEFAULT_DT,
    GridState,
    NetworkModel,
    SetpointVector,
    compose_setpoints,
    nominal_setpoints,
    steady_state,
    step_dynamics,
)


class Channel(str, enum.Enum):
    VOLTAGE = "Voltage"
    ACTIVE_POWER = "ActivePower"


@dataclass(frozen=True)
class AttackScenario:
    inverter_id: int
    channel: Channel
    magnitude: float
    t_a: int
    duration: int

    def __post_init__(self):
        object.__setattr__(self, "channel", Channel(self.channel))

    def active(self, t: int) -> bool:
        return self.t_a <= t < self.t_a + self.duration

    @property
    def key(self) -> tuple[int, float, int]:
        return (self.inverter_id, self.magnitude, self.t_a)


@dataclass
class EnvConfig:
    episode_len: int = 40
    band_lo: float = 0.99
    band_hi: float = 1.01
    q_weights: Sequence[float] | None = None  # per bus; None means all ones
    c: float = 1.0
    action_bound: float = 0.1
    act_threshold: float = 0.005
    dt: float = DEFAULT_DT
    load_scale: float = 1.0
    magnitude_range: tuple[float, float] = (0.03, 0.15)
    onset_range: tuple[int, int] = (5, 15)
    attack_channel: Channel = Channel.VOLTAGE
    seed: int = 0

    def __post_init__(self):
        if not self.band_lo < 1.0 < self.band_hi:
            raise DomainError("recovery band must straddle 1.0")
        if self.episode_len < 1:
            raise DomainError("episode_len must be >= 1")
        self.magnitude_range = tuple(self.magnitude_range)
        self.onset_range = tuple(self.onset_range)
        self.attack_channel = Channel(self.attack_channel)


def normalize_obs(V, V_ss) -> np.ndarray:
    V = np.asarray(V, dtype=float)
    V_ss = np.asarray(V_ss, dtype=float)
    if np.any(V_ss == 0):
        raise DomainError("steady-state voltage contains a zero entry")
    return V / V_ss


def reward(V_mg, V_ss_mg, t: int, t_a: float, action_mg, cfg: EnvConfig, weights=None) -> float:
    """Piecewise resilience reward for one agent.

    Up to and including the attack instant only acting is penalized; afterwards
    the weighted absolute deviation is charged whenever any bus leaves the
    band around its pre-attack steady state.
    """
    V_mg = np.asarray(V_mg, dtype=float).ravel()
    V_ss_mg = np.asarray(V_ss_mg, dtype=float).ravel()
    if V_mg.shape != V_ss_mg.shape:
        raise DomainError("voltage and steady-state vectors differ in length")
    if t <= t_a:
        invalid = np.max(np.abs(action_mg), initial=0.0) > cfg.act_threshold
        return -cfg.c * float(invalid)
    w = np.ones_like(V_mg) if weights is None else np.asarray(weights, dtype=float).ravel()
    outside = (V_mg < cfg.band_lo * V_ss_mg) | (V_mg > cfg.band_hi * V_ss_mg)
    if not outside.any():
        return 0.0
    return -float(np.sum(w * np.abs(V_mg - V_ss_mg)))


def build_scenario_pool(
    net: NetworkModel,
    cfg: EnvConfig,
    n: int,
    rng: np.random.Generator,
    exclude: Iterable[AttackScenario] = (),
) -> list[AttackScenario]:
    """Sample ``n`` persistent attacks on randomly chosen GFMs.

    Scenarios whose (inverter, magnitude, onset) triple occurs in ``exclude``
    are redrawn, which keeps test pools disjoint from training pools.
    """
    if n < 1:
        raise DomainError("pool size must be >= 1")
    gfms = net.gfm_ids
    if not gfms:
        raise DomainError("network has no grid-forming inverter to attack")
    lo, hi = cfg.magnitude_range
    t_lo = max(1, cfg.onset_range[0])
    t_hi = min(cfg.onset_range[1], cfg.episode_len - 1)
    if t_lo > t_hi:
        raise DomainError(f"onset range {cfg.onset_range} does not fit an episode of {cfg.episode_len} steps")
    seen = {s.key for s in exclude}
    pool = []
    while len(pool) < n:
        inv = gfms[int(rng.integers(len(gfms)))]
        mag = float(rng.uniform(lo, hi)) * (1.0 if rng.random() < 0.5 else -1.0)
        t_a = int(rng.integers(t_lo, t_hi + 1))
        sc = AttackScenario(inv, cfg.attack_channel, mag, t_a, cfg.episode_len - t_a)
        if sc.key in seen:
            continue
        seen.add(sc.key)
        pool.append(sc)
    return pool


POOL_FIELDS = ("inverter_id", "channel", "magnitude", "t_a", "duration")


def write_pool(path, pool: Sequence[AttackScenario]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(POOL_FIELDS)
        for s in pool:
            w.writerow([s.inverter_id, s.channel.value, repr(s.magnitude), s.t_a, s.duration])


def read_pool(path) -> list[AttackScenario]:
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or tuple(reader.fieldnames) != POOL_FIELDS:
            raise DomainError(f"{path}: expected header {','.join(POOL_FIELDS)}")
        pool = []
        for lineno, row in enumerate(reader, start=2):
            try:
                pool.append(
                    AttackScenario(
                        int(row["inverter_id"]), Channel(row["channel"]), float(row["magnitude"]),
                        int(row["t_a"]), int(row["duration"]),
                    )
                )
            except (TypeError, ValueError) as exc:
                raise DomainError(f"{path}:{lineno}: {exc}") from None
    return pool


class Environment:
    """Coupled multi-microgrid environment with one agent per microgrid.

    ``reset`` and ``step`` exchange lists with one entry per agent: observations
    are the agent's own bus voltages (all phases) divided by their steady-state
    values, actions lie in [-1, 1] and are scaled to voltage set-point residuals
    of the agent's GFMs.
    """

    def __init__(self, net: NetworkModel, cfg: EnvConfig | None = None):
        self.net = net
        self.cfg = cfg or EnvConfig()
        self.nominal = nominal_setpoints(net)
        self.ss_state = steady_state(net, self.nominal, dt=self.cfg.dt, load_scale=self.cfg.load_scale)
        self.v_ss = self.ss_state.V
        self.agents = net.microgrids
        self.obs_buses = [net.buses_of(mg) for mg in self.agents]
        self.act_inverters = [net.gfms_of(mg) for mg in self.agents]
        self.obs_dims = [len(b) * net.n_phases for b in self.obs_buses]
        self.act_dims = [len(g) for g in self.act_inverters]
        if self.cfg.q_weights is None:
            self.q_weights = np.ones(net.n_buses)
        else:
            self.q_weights = np.asarray(self.cfg.q_weights, dtype=float)
            if self.q_weights.shape != (net.n_buses,):
                raise DomainError("q_weights needs one entry per bus")
        self.rng = np.random.default_rng(self.cfg.seed)
        self.pool: list[AttackScenario] | None = None
        self.state: GridState | None = None
        self.scenario: AttackScenario | None = None
        self.done = True

    @property
    def n_agents(self) -> int:
        return len(self.agents)

    @property
    def obs_size(self) -> int:
        return sum(self.obs_dims)

    def validate_scenario(self, sc: AttackScenario) -> None:
        if not 0 <= sc.inverter_id < self.net.n_inverters or not self.net.inverters[sc.inverter_id].is_gfm:
            raise DomainError(f"scenario targets inverter {sc.inverter_id}, which is not a GFM")
        if sc.t_a < 1 or sc.duration < 0 or sc.t_a + sc.duration > self.cfg.episode_len:
            raise DomainError(f"scenario window t_a={sc.t_a}, duration={sc.duration} does not fit the episode")
        if not np.isfinite(sc.magnitude):
            raise DomainError("scenario magnitude must be finite")

    def sample_scenario(self) -> AttackScenario:
        if self.pool:
            return self.pool[int(self.rng.integers(len(self.pool)))]
        return build_scenario_pool(self.net, self.cfg, 1, self.rng)[0]

    def reset(self, scenario: AttackScenario | None = None, *, attack: bool = True) -> list[np.ndarray]:
        """Return to the pre-attack steady state.

        With no explicit scenario one is drawn from ``self.pool`` (or freshly
        sampled); ``attack=False`` runs an unattacked episode.
        """
        if scenario is None and attack:
            scenario = self.sample_scenario()
        if scenario is not None:
            self.validate_scenario(scenario)
        self.scenario = scenario
        self.state = self.ss_state.copy()
        self.state.t = 0
        self.done = False
        return self.observe()

    def observe(self) -> list[np.ndarray]:
        norm = normalize_obs(self.state.V, self.v_ss)
        return [norm[b].ravel() for b in self.obs_buses]

    def residual_setpoints(self, actions: Sequence) -> tuple[SetpointVector, list[np.ndarray]]:
        if len(actions) != self.n_agents:
            raise DomainError(f"expected {self.n_agents} agent actions, got {len(actions)}")
        res = SetpointVector.zeros(self.net.n_inverters)
        scaled = []
        for k, (a, inv) in enumerate(zip(actions, self.act_inverters)):
            a = np.asarray(a, dtype=float).ravel()
            if a.shape != (len(inv),):
                raise DomainError(f"agent {k} action must have {len(inv)} entries, got {a.shape}")
            u = self.cfg.action_bound * np.clip(a, -1.0, 1.0)
            res.V[inv] = u
            scaled.append(u)
        return res, scaled

    def attack_setpoints(self, t: int) -> SetpointVector:
        att = SetpointVector.zeros(self.net.n_inverters)
        sc = self.scenario
        if sc is not None and sc.active(t):
            if sc.channel is Channel.VOLTAGE:
                att.V[sc.inverter_id] = sc.magnitude
            else:
                att.P[sc.inverter_id] = sc.magnitude
        return att

    @property
    def attack_onset(self) -> float:
        # an unattacked episode never leaves the pre-attack reward regime
        return float("inf") if self.scenario is None else self.scenario.t_a

    def step(self, actions: Sequence) -> tuple[list[np.ndarray], np.ndarray, np.ndarray]:
        if self.done or self.state is None:
            raise ProtocolError("step() called on a finished episode; call reset() first")
        t = self.state.t
        res, scaled = self.residual_setpoints(actions)
        sp = compose_setpoints(self.nominal, res, self.attack_setpoints(t))
        self.state = step_dynamics(self.state, sp, self.net, self.cfg.dt, self.cfg.load_scale)
        rewards = np.array(
            [
                reward(
                    self.state.V[b], self.v_ss[b], t, self.attack_onset, u, self.cfg,
                    np.repeat(self.q_weights[b], self.net.n_phases),
                )
                for b, u in zip(self.obs_buses, scaled)
            ]
        )
        self.done = self.state.t >= self.cfg.episode_len
        dones = np.full(self.n_agents, self.done)
        return self.observe(), rewards, dones

    def in_band(self) -> bool:
        V = self.state.V
        return bool(np.all((V >= self.cfg.band_lo * self.v_ss) & (V <= self.cfg.band_hi * self.v_ss)))
