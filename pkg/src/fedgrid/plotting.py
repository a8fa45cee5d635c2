"""PNG renderings of the CSV outputs. The CSVs are the record; these are for looking at."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.dpi": 110,
    "savefig.bbox": "tight",
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 9,
    "legend.frameon": False,
}


def _save(fig, path: Path) -> Path:
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def smooth(y: np.ndarray, window: int) -> np.ndarray:
    if window <= 1 or len(y) < window:
        return np.asarray(y, dtype=float)
    kernel = np.ones(window) / window
    return np.convolve(y, kernel, mode="valid")


def plot_training_rewards(R: np.ndarray, path: Path, title: str = "", window: int = 10) -> Path:
    """One line per agent, episodic reward against episode (moving average)."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5.5, 3.2))
        for k in range(R.shape[1]):
            y = smooth(R[:, k], window)
            ax.plot(np.arange(len(y)) + (len(R) - len(y)), y, lw=1.2, label=f"agent {k}")
        ax.set_xlabel("episode")
        ax.set_ylabel("episodic reward")
        if title:
            ax.set_title(title)
        ax.legend()
        return _save(fig, path)


def plot_mode_comparison(curves: Mapping[str, np.ndarray], path: Path, window: int = 10) -> Path:
    """Seed-mean reward per agent, one panel per agent, one line per training mode.

    ``curves[mode]`` has shape (seeds, episodes, agents).
    """
    n_agents = next(iter(curves.values())).shape[2]
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, n_agents, figsize=(3.2 * n_agents, 3.0), sharey=True, squeeze=False)
        for k, ax in enumerate(axes[0]):
            for mode, C in curves.items():
                mean = smooth(C[:, :, k].mean(axis=0), window)
                x = np.arange(len(mean)) + (C.shape[1] - len(mean))
                ax.plot(x, mean, lw=1.2, label=mode)
                if C.shape[0] > 1:
                    lo = smooth(C[:, :, k].min(axis=0), window)
                    hi = smooth(C[:, :, k].max(axis=0), window)
                    ax.fill_between(x, lo, hi, alpha=0.15)
            ax.set_title(f"agent {k}")
            ax.set_xlabel("episode")
        axes[0][0].set_ylabel("episodic reward")
        axes[0][-1].legend()
        return _save(fig, path)


def plot_reward_histogram(rewards: Mapping[str, Sequence[float]], path: Path, bins: int = 30) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5.0, 3.2))
        allr = np.concatenate([np.asarray(v, dtype=float) for v in rewards.values()])
        edges = np.histogram_bin_edges(allr, bins=bins)
        for label, r in rewards.items():
            ax.hist(r, bins=edges, alpha=0.6, label=label)
        ax.set_xlabel("episodic reward (sum over agents)")
        ax.set_ylabel("scenarios")
        ax.legend()
        return _save(fig, path)


def plot_voltage_traces(
    t: np.ndarray,
    traces: Mapping[str, np.ndarray],
    v_ss: np.ndarray,
    buses: Sequence[int],
    path: Path,
    band: tuple[float, float] = (0.99, 1.01),
    t_a: float | None = None,
) -> Path:
    """Phase-mean voltage of each listed bus; ``traces[label]`` has shape (T, buses, phases)."""
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(len(buses), 1, figsize=(5.5, 1.9 * len(buses)), sharex=True, squeeze=False)
        for ax, b in zip(axes[:, 0], buses):
            ref = float(np.mean(v_ss[b]))
            ax.axhspan(band[0] * ref, band[1] * ref, color="0.85", lw=0)
            for label, V in traces.items():
                ax.plot(t, V[:, b].mean(axis=1), lw=1.2, label=label)
            if t_a is not None:
                ax.axvline(t_a, color="0.4", ls="--", lw=0.8)
            ax.set_ylabel(f"bus {b} V (pu)")
        axes[-1, 0].set_xlabel("step")
        axes[0, 0].legend(loc="best")
        return _save(fig, path)
