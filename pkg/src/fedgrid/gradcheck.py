"""Finite-difference audit of every analytic gradient the learners rely on."""

from __future__ import annotations

import contextlib
from typing import Callable

import numpy as np

from .nn import MLP
from .sac import DOUBLE_MIN, SINGLE_PAIR, Agent, SacHyper, critic_loss_and_grad, policy_objective_and_grad

TOLERANCE = 1e-4


def central_difference(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    x = x.copy()
    g = np.empty_like(x)
    for i in range(x.size):
        old = x[i]
        x[i] = old + h
        fp = f(x)
        x[i] = old - h
        fm = f(x)
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    a, b = np.ravel(a), np.ravel(b)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def _random_sizes(rng) -> list[int]:
    depth = int(rng.integers(1, 4))
    return [int(rng.integers(2, 6))] + [int(rng.integers(3, 9)) for _ in range(depth)] + [int(rng.integers(1, 4))]


def check_mlp(rng) -> float:
    net = MLP(_random_sizes(rng), rng)
    X = rng.normal(size=(4, net.sizes[0]))
    R = rng.normal(size=(4, net.sizes[-1]))
    _, cache = net.forward(X)
    grad, gx = net.backward(cache, R)
    fd = central_difference(lambda f: float(np.sum(MLP(net.sizes, flat=f)(X) * R)), net.flat)
    fdx = central_difference(lambda x: float(np.sum(net(x.reshape(X.shape)) * R)), X.ravel())
    return max(relative_error(grad, fd), relative_error(gx, fdx))


def check_critic_loss(rng) -> float:
    sizes = _random_sizes(rng)
    sizes[-1] = 1
    net = MLP(sizes, rng)
    z, y = rng.normal(size=(8, sizes[0])), rng.normal(size=8)
    _, grad = critic_loss_and_grad(net, z, y)
    fd = central_difference(lambda f: critic_loss_and_grad(MLP(sizes, flat=f), z, y)[0], net.flat)
    return relative_error(grad, fd)


def check_policy_objective(rng) -> float:
    obs_dim, act_dim = int(rng.integers(2, 6)), int(rng.integers(1, 3))
    hidden = tuple(int(rng.integers(3, 9)) for _ in range(int(rng.integers(1, 3))))
    hyper = SacHyper(hidden=hidden, zeta=float(rng.uniform(0.0, 0.5)), obs_gain=1.0)
    ag = Agent(0, obs_dim, act_dim, hyper, rng)
    feat = rng.normal(size=(6, obs_dim))
    noise = rng.normal(size=(6, act_dim))
    mode = DOUBLE_MIN if rng.random() < 0.5 else SINGLE_PAIR
    _, grad = policy_objective_and_grad(ag, feat, noise, hyper, mode)
    saved = ag.policy.flat.copy()

    def objective(flat):
        ag.policy.assign(flat)
        return policy_objective_and_grad(ag, feat, noise, hyper, mode)[0]

    fd = central_difference(objective, saved)
    ag.policy.assign(saved)
    return relative_error(grad, fd)


CHECKS: dict[str, Callable] = {
    "mlp_backward": check_mlp,
    "critic_loss": check_critic_loss,
    "policy_objective": check_policy_objective,
}


def run_gradcheck(n_nets: int = 20, seed: int = 0) -> dict[str, float]:
    """Worst relative error per operation over ``n_nets`` random networks each."""
    streams = np.random.SeedSequence(seed).spawn(len(CHECKS))
    out = {}
    for (name, check), ss in zip(CHECKS.items(), streams):
        rng = np.random.default_rng(ss)
        out[name] = max(check(rng) for _ in range(n_nets))
    return out


@contextlib.contextmanager
def corrupted_backward(scale: float = 1.001):
    """Test hook: every parameter gradient from ``MLP.backward`` comes back slightly scaled."""
    original = MLP.backward

    def backward(self, cache, grad_out, param_grads=True):
        grad, gx = original(self, cache, grad_out, param_grads)
        return (None if grad is None else grad * scale), gx

    MLP.backward = backward
    try:
        yield
    finally:
        MLP.backward = original
