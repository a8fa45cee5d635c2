"""Small numpy MLPs with hand-written backprop, Adam, and a tanh-squashed Gaussian head.

Every network keeps its parameters in a single flat float64 vector; the
per-layer ``(W, b)`` pairs are views into it.  Optimizer steps, Polyak
blending, federated averaging and checkpointing all operate on that vector.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .errors import DomainError, NonFiniteError, ProtocolError

LOG_STD_MIN = -20.0
LOG_STD_MAX = 2.0
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)
_LOG2 = math.log(2.0)


def layer_shapes(sizes: Sequence[int]) -> list[tuple[int, int]]:
    return [(o, i) for i, o in zip(sizes[:-1], sizes[1:])]


def param_count(sizes: Sequence[int]) -> int:
    return sum(o * i + o for o, i in layer_shapes(sizes))


def unflatten_params(flat: np.ndarray, sizes: Sequence[int]) -> list[tuple[np.ndarray, np.ndarray]]:
    """Split a flat vector into per-layer ``(W, b)`` views (no copy)."""
    if flat.shape != (param_count(sizes),):
        raise DomainError(f"flat vector of length {flat.size} does not fit layer sizes {tuple(sizes)}")
    layers, k = [], 0
    for o, i in layer_shapes(sizes):
        W = flat[k : k + o * i].reshape(o, i)
        k += o * i
        b = flat[k : k + o]
        k += o
        layers.append((W, b))
    return layers


def flatten_params(layers: Sequence[tuple[np.ndarray, np.ndarray]]) -> np.ndarray:
    return np.concatenate([np.concatenate([W.ravel(), b.ravel()]) for W, b in layers])


class MLP:
    """Fully connected ReLU network with a linear output layer."""

    def __init__(self, sizes: Sequence[int], rng: np.random.Generator | None = None, flat=None):
        if len(sizes) < 2:
            raise DomainError("an MLP needs at least input and output sizes")
        self.sizes = tuple(int(s) for s in sizes)
        self.flat = np.zeros(param_count(self.sizes))
        self.layers = unflatten_params(self.flat, self.sizes)
        if flat is not None:
            self.flat[:] = flat
        elif rng is not None:
            for W, b in self.layers:
                bound = 1.0 / math.sqrt(W.shape[1])
                W[...] = rng.uniform(-bound, bound, W.shape)
                b[...] = rng.uniform(-bound, bound, b.shape)
        self.version = 0

    def __repr__(self):
        return f"MLP({'x'.join(map(str, self.sizes))})"

    @property
    def n_params(self) -> int:
        return self.flat.size

    def touch(self) -> None:
        """Mark parameters as modified so earlier forward caches become stale."""
        self.version += 1

    def assign(self, flat: np.ndarray) -> None:
        self.flat[:] = flat
        self.touch()

    def copy(self) -> "MLP":
        return MLP(self.sizes, flat=self.flat)

    def forward(self, x):
        x = np.asarray(x, dtype=float)
        squeeze = x.ndim == 1
        h = x[None, :] if squeeze else x
        if h.shape[-1] != self.sizes[0]:
            raise DomainError(f"{self!r} expects inputs of size {self.sizes[0]}, got {h.shape[-1]}")
        acts = [h]
        last = len(self.layers) - 1
        for k, (W, b) in enumerate(self.layers):
            h = h @ W.T + b
            if k < last:
                h = np.maximum(h, 0.0)
            acts.append(h)
        out = h[0] if squeeze else h
        return out, (self.version, squeeze, acts)

    def __call__(self, x):
        return self.forward(x)[0]

    def backward(self, cache, grad_out, param_grads: bool = True):
        """Reverse-mode pass; returns ``(flat parameter gradient or None, input gradient)``."""
        version, squeeze, acts = cache
        if version != self.version:
            raise ProtocolError(f"{self!r}: backward() with a cache from before the last parameter update")
        g = np.asarray(grad_out, dtype=float)
        g = g[None, :] if squeeze else g
        grad = np.zeros_like(self.flat) if param_grads else None
        glayers = unflatten_params(grad, self.sizes) if param_grads else None
        for k in range(len(self.layers) - 1, -1, -1):
            W, _ = self.layers[k]
            if param_grads:
                gW, gb = glayers[k]
                np.matmul(g.T, acts[k], out=gW)
                gb[:] = g.sum(axis=0)
            g = g @ W
            if k > 0:
                g = g * (acts[k] > 0)
        return grad, (g[0] if squeeze else g)


def clip_grad_norm(grad: np.ndarray, max_norm: float) -> np.ndarray:
    norm = float(np.sqrt(grad @ grad))
    if max_norm is not None and norm > max_norm:
        return grad * (max_norm / norm)
    return grad


class Adam:
    """Adaptive-moment optimizer over one flat parameter vector."""

    def __init__(self, n: int, lr: float = 3e-4, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.t = 0

    def step(self, params: np.ndarray, grads: np.ndarray) -> None:
        if grads.shape != params.shape or params.shape != self.m.shape:
            raise DomainError("parameter, gradient and moment shapes differ")
        if not np.all(np.isfinite(grads)):
            raise NonFiniteError("non-finite gradient; update skipped")
        self.t += 1
        self.m *= self.beta1
        self.m += (1.0 - self.beta1) * grads
        self.v *= self.beta2
        self.v += (1.0 - self.beta2) * (grads * grads)
        mhat = self.m / (1.0 - self.beta1**self.t)
        vhat = self.v / (1.0 - self.beta2**self.t)
        params -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


def log1m_tanh_sq(x):
    """log(1 - tanh(x)^2), stable for large |x|."""
    return 2.0 * (_LOG2 - x - np.logaddexp(0.0, -2.0 * x))


def sample_squashed(mu, log_std, noise):
    """Reparameterized draw ``tanh(mu + sigma * noise)`` and its log-density.

    The log-density is the Gaussian term minus the tanh change of variables,
    summed over the last axis.
    """
    mu = np.asarray(mu, dtype=float)
    log_std = np.clip(log_std, LOG_STD_MIN, LOG_STD_MAX)
    x = mu + np.exp(log_std) * noise
    a = np.tanh(x)
    logp = np.sum(-0.5 * np.square(noise) - log_std - _HALF_LOG_2PI - log1m_tanh_sq(x), axis=-1)
    return a, logp


def squashed_logprob(a, mu, log_std):
    """Density of an already squashed action (used for quadrature checks)."""
    log_std = np.clip(log_std, LOG_STD_MIN, LOG_STD_MAX)
    x = np.arctanh(a)
    z = (x - mu) / np.exp(log_std)
    return np.sum(-0.5 * z * z - log_std - _HALF_LOG_2PI - log1m_tanh_sq(x), axis=-1)


def policy_forward(net: MLP, obs, noise):
    """Run a policy network whose output is ``[mu, raw log-std]`` and squash a sample."""
    out, cache = net.forward(obs)
    d = out.shape[-1] // 2
    mu, raw = out[..., :d], out[..., d:]
    a, logp = sample_squashed(mu, raw, noise)
    return a, logp, (cache, mu, raw, noise, a)


def policy_backward(net: MLP, pcache, g_a, g_logp):
    """Parameter gradient of a loss with partials ``g_a`` (per action) and ``g_logp`` (per sample)."""
    cache, mu, raw, noise, a = pcache
    g_logp = np.asarray(g_logp, dtype=float)[..., None]
    std = np.exp(np.clip(raw, LOG_STD_MIN, LOG_STD_MAX))
    # d logp / d x = 2 tanh(x); d logp / d log_std = -1 (noise held fixed)
    g_x = g_a * (1.0 - a * a) + g_logp * 2.0 * a
    g_raw = (g_x * std * noise - g_logp) * ((raw > LOG_STD_MIN) & (raw < LOG_STD_MAX))
    grad, _ = net.backward(cache, np.concatenate([g_x, g_raw], axis=-1))
    return grad
