"""Independent reference computations used by the tests."""

import numpy as np


def fd_gradient(f, x, h=1e-5):
    """Central finite differences of a scalar function over every entry of ``x``."""
    g = np.zeros_like(x)
    for i in range(x.size):
        old = x[i]
        x[i] = old + h
        fp = f(x)
        x[i] = old - h
        fm = f(x)
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def max_rel_error(a, b, floor=1e-6):
    a, b = np.ravel(a), np.ravel(b)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def loop_forward(layers, x):
    """Plain-Python affine/ReLU pass over ``(W, b)`` layers."""
    h = [float(v) for v in x]
    for k, (W, b) in enumerate(layers):
        out = []
        for i in range(W.shape[0]):
            s = float(b[i])
            for j in range(W.shape[1]):
                s += float(W[i, j]) * h[j]
            out.append(s if k == len(layers) - 1 else max(s, 0.0))
        h = out
    return h
