"""Soft actor-critic for one microgrid agent: replay, twin critics, Polyak targets."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .errors import DomainError, NonFiniteError, ProtocolError
from .nn import MLP, Adam, clip_grad_norm, policy_backward, policy_forward


@dataclass
class SacHyper:
    gamma: float = 0.99
    # weight of the online critic in each target update (targets keep 1 - rho)
    rho: float = 0.005
    zeta: float = 0.005
    batch_size: int = 256
    lr: float = 3e-4
    hidden: tuple[int, ...] = (64, 64)
    grad_clip: float | None = 10.0
    warmup: int = 256
    buffer_capacity: int = 1_000_000
    obs_gain: float = 50.0

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if not 0.0 < self.gamma < 1.0:
            raise DomainError("gamma must lie in (0, 1)")
        if not 0.0 <= self.rho <= 1.0:
            raise DomainError("rho must lie in [0, 1]")
        if self.batch_size < 1:
            raise DomainError("batch_size must be positive")


@dataclass(frozen=True)
class ClipMode:
    """Which critic pair(s) form targets and policy values.

    ``pair=None`` is clipped double-Q (minimum over both pairs); ``pair=k``
    (1-based) uses critic/target pair ``k`` alone.
    """

    pair: int | None = None

    @property
    def double(self) -> bool:
        return self.pair is None

    @property
    def active(self) -> list[int]:
        return [0, 1] if self.pair is None else [self.pair - 1]

    def __str__(self):
        return "DoubleMin" if self.pair is None else f"SinglePair({self.pair})"


DOUBLE_MIN = ClipMode()
SINGLE_PAIR = ClipMode(1)


class Batch(NamedTuple):
    o: np.ndarray
    u: np.ndarray
    r: np.ndarray
    o2: np.ndarray
    d: np.ndarray


class ReplayBuffer:
    """FIFO ring of transitions with uniform sampling (with replacement)."""

    def __init__(self, obs_dim: int, act_dim: int, capacity: int = 1_000_000):
        if capacity < 1:
            raise DomainError("replay capacity must be positive")
        self.obs_dim, self.act_dim, self.capacity = obs_dim, act_dim, capacity
        self.count = 0
        self._alloc(min(capacity, 1024))

    def _alloc(self, n: int) -> None:
        old = getattr(self, "o", None)
        arrays = dict(
            o=np.zeros((n, self.obs_dim)), u=np.zeros((n, self.act_dim)), r=np.zeros(n),
            o2=np.zeros((n, self.obs_dim)), d=np.zeros(n),
        )
        if old is not None:
            k = len(self)
            for name, arr in arrays.items():
                arr[:k] = getattr(self, name)[:k]
        for name, arr in arrays.items():
            setattr(self, name, arr)

    def __len__(self) -> int:
        return min(self.count, self.capacity)

    def push(self, o, u, r, o2, d) -> None:
        o, u, o2 = (np.asarray(x, dtype=float).ravel() for x in (o, u, o2))
        if o.shape != (self.obs_dim,) or o2.shape != (self.obs_dim,) or u.shape != (self.act_dim,):
            raise DomainError("transition dimensions do not match the buffer")
        if self.count < self.capacity and self.count == len(self.r):
            self._alloc(min(self.capacity, 2 * len(self.r)))
        i = self.count % self.capacity
        self.o[i], self.u[i], self.r[i], self.o2[i], self.d[i] = o, u, r, o2, float(bool(d))
        self.count += 1

    def sample(self, n: int, rng: np.random.Generator) -> Batch:
        if len(self) == 0:
            raise ProtocolError("cannot sample from an empty replay buffer")
        idx = rng.integers(0, len(self), size=n)
        return Batch(self.o[idx], self.u[idx], self.r[idx], self.o2[idx], self.d[idx])

    def items(self) -> Batch:
        """All stored transitions, oldest first."""
        k = len(self)
        order = np.arange(k) if self.count <= self.capacity else (np.arange(k) + self.count) % self.capacity
        return Batch(self.o[order], self.u[order], self.r[order], self.o2[order], self.d[order])


_NEXT_STAGE = {"idle": "targets", "targets": "critics", "critics": "policy", "policy": "polyak"}


class Agent:
    """Everything one microgrid owns: policy, twin critics and targets, optimizers, replay."""

    def __init__(self, agent_id: int, obs_dim: int, act_dim: int, hyper: SacHyper | None = None, seed=None):
        self.id = agent_id
        self.obs_dim, self.act_dim = obs_dim, act_dim
        self.hyper = hyper or SacHyper()
        self.rng = np.random.default_rng(seed)
        h = self.hyper
        self.policy = MLP([obs_dim, *h.hidden, 2 * act_dim], self.rng)
        self.critics = [MLP([obs_dim + act_dim, *h.hidden, 1], self.rng) for _ in range(2)]
        self.targets = [c.copy() for c in self.critics]
        self.policy_opt = Adam(self.policy.n_params, lr=h.lr)
        self.critic_opts = [Adam(c.n_params, lr=h.lr) for c in self.critics]
        self.buffer = ReplayBuffer(obs_dim, act_dim, h.buffer_capacity)
        self.enforce_order = True
        self.stage = "idle"

    def advance(self, stage: str) -> None:
        if not self.enforce_order:
            return
        if _NEXT_STAGE[self.stage] != stage:
            raise ProtocolError(f"agent {self.id}: '{stage}' may not follow '{self.stage}'")
        self.stage = "idle" if stage == "polyak" else stage

    def features(self, obs):
        return self.hyper.obs_gain * (np.asarray(obs, dtype=float) - 1.0)

    def act(self, obs, deterministic: bool = False) -> np.ndarray:
        out = self.policy(self.features(obs))
        d = self.act_dim
        if deterministic:
            return np.tanh(out[..., :d])
        noise = self.rng.standard_normal(out[..., :d].shape)
        a, _, _ = policy_forward(self.policy, self.features(obs), noise)
        return a

    def store(self, o, u, r, o2, d) -> None:
        self.buffer.push(o, u, r, o2, d)

    def update(self, mode: ClipMode = DOUBLE_MIN) -> dict[str, float]:
        """One full gradient iteration in the fixed order targets -> critics -> policy -> Polyak."""
        batch = self.buffer.sample(self.hyper.batch_size, self.rng)
        y = compute_targets(self, batch, self.hyper, mode)
        losses = update_critics(self, batch, y, self.hyper, mode)
        losses["policy"] = update_policy(self, batch, self.hyper, mode)
        polyak_update(self, 1.0 - self.hyper.rho, mode)
        return losses


def _critic_input(feat, u):
    return np.concatenate([feat, u], axis=-1)


def compute_targets(agent: Agent, batch: Batch, hyper: SacHyper, mode: ClipMode = DOUBLE_MIN, noise=None):
    """Soft Bellman targets, using a fresh policy sample at each next observation."""
    agent.advance("targets")
    if len(batch.r) == 0:
        raise DomainError("empty batch")
    f2 = agent.features(batch.o2)
    if noise is None:
        noise = agent.rng.standard_normal((len(batch.r), agent.act_dim))
    a2, logp2, _ = policy_forward(agent.policy, f2, noise)
    z2 = _critic_input(f2, a2)
    qs = [agent.targets[i](z2)[:, 0] for i in mode.active]
    T = np.minimum(qs[0], qs[1]) if mode.double else qs[0]
    return batch.r + hyper.gamma * (1.0 - batch.d) * (T - hyper.zeta * logp2)


def critic_loss_and_grad(critic: MLP, z, y):
    q, cache = critic.forward(z)
    err = q[:, 0] - y
    loss = float(np.mean(err * err))
    grad, _ = critic.backward(cache, (2.0 / len(y)) * err[:, None])
    return loss, grad


def update_critics(agent: Agent, batch: Batch, y, hyper: SacHyper, mode: ClipMode = DOUBLE_MIN) -> dict[str, float]:
    """One Adam step per active critic on the mean squared Bellman error (``y`` held constant)."""
    agent.advance("critics")
    z = _critic_input(agent.features(batch.o), batch.u)
    y = np.array(y, dtype=float)
    losses = {}
    for i in mode.active:
        critic = agent.critics[i]
        loss, grad = critic_loss_and_grad(critic, z, y)
        if not np.isfinite(loss):
            raise NonFiniteError(f"agent {agent.id}: critic {i + 1} loss is {loss}; update skipped")
        agent.critic_opts[i].step(critic.flat, clip_grad_norm(grad, hyper.grad_clip))
        critic.touch()
        losses[f"q{i + 1}"] = loss
    return losses


def policy_objective_and_grad(agent: Agent, feat, noise, hyper: SacHyper, mode: ClipMode = DOUBLE_MIN):
    """Loss ``mean(zeta * logp - min_i Q_i(o, a))`` and its gradient w.r.t. the policy parameters."""
    n = feat.shape[0]
    a, logp, pcache = policy_forward(agent.policy, feat, noise)
    z = _critic_input(feat, a)
    outs = [agent.critics[i].forward(z) for i in mode.active]
    qs = [q[:, 0] for q, _ in outs]
    if mode.double:
        pick = qs[0] <= qs[1]
        qmin = np.where(pick, qs[0], qs[1])
        masks = [pick, ~pick]
    else:
        qmin = qs[0]
        masks = [np.ones(n, dtype=bool)]
    loss = float(np.mean(hyper.zeta * logp - qmin))
    g_a = np.zeros_like(a)
    for i, (_, cache), m in zip(mode.active, outs, masks):
        _, gz = agent.critics[i].backward(cache, (-m.astype(float) / n)[:, None], param_grads=False)
        g_a += gz[:, agent.obs_dim :]
    grad = policy_backward(agent.policy, pcache, g_a, np.full(n, hyper.zeta / n))
    return loss, grad


def update_policy(agent: Agent, batch: Batch, hyper: SacHyper, mode: ClipMode = DOUBLE_MIN, noise=None) -> float:
    """One Adam step on the policy through reparameterized actions; critics stay frozen."""
    agent.advance("policy")
    feat = agent.features(batch.o)
    if noise is None:
        noise = agent.rng.standard_normal((feat.shape[0], agent.act_dim))
    loss, grad = policy_objective_and_grad(agent, feat, noise, hyper, mode)
    if not np.isfinite(loss):
        raise NonFiniteError(f"agent {agent.id}: policy loss is {loss}; update skipped")
    agent.policy_opt.step(agent.policy.flat, clip_grad_norm(grad, hyper.grad_clip))
    agent.policy.touch()
    return loss


def polyak_update(agent: Agent, rho: float, mode: ClipMode = DOUBLE_MIN) -> None:
    """``target <- rho * target + (1 - rho) * critic`` for each active pair."""
    agent.advance("polyak")
    for i in mode.active:
        tgt = agent.targets[i]
        tgt.flat *= rho
        tgt.flat += (1.0 - rho) * agent.critics[i].flat
        tgt.touch()


def make_agents(obs_dims: Sequence[int], act_dims: Sequence[int], hyper: SacHyper, seed: int) -> list[Agent]:
    """One agent per microgrid, each with its own independent random stream."""
    seqs = np.random.SeedSequence(seed).spawn(len(obs_dims))
    return [Agent(k, o, a, hyper, np.random.default_rng(s)) for k, (o, a, s) in enumerate(zip(obs_dims, act_dims, seqs))]
