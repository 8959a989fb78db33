"""PNG figures rendered next to the CSV outputs."""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

__all__ = ["plot_inputs", "plot_states", "plot_sweep", "plot_residuals"]


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_inputs(path, t, q, total, bound=None):
    """Per-agent inputs (original units) and their sum.

    ``q`` is a list of per-agent series.
    """
    fig, (ax1, ax2) = plt.subplots(2, 1, figsize=(7, 5), sharex=True)
    for i, series in enumerate(q, start=1):
        ax1.step(t, series, where="post", label=f"agent {i}")
    ax1.set_ylabel("input")
    ax1.legend(loc="best", fontsize=8)
    ax2.step(t, total, where="post", color="k", label="total")
    if bound is not None:
        ax2.axhline(bound, color="r", ls="--", lw=1, label="bound")
    ax2.set_xlabel("t")
    ax2.set_ylabel("total input")
    ax2.legend(loc="best", fontsize=8)
    return _save(fig, path)


def plot_states(path, t, x):
    """``x[i][j]`` is the series of state ``j`` of agent ``i``."""
    n = len(x[0])
    fig, axes = plt.subplots(n, 1, figsize=(7, 2.2 * n + 0.6), sharex=True, squeeze=False)
    for j in range(n):
        ax = axes[j, 0]
        for i, agent in enumerate(x, start=1):
            ax.plot(t, agent[j], label=f"agent {i}")
        ax.axhline(0.0, color="0.6", lw=0.8)
        ax.set_ylabel(f"x{j + 1}")
    axes[0, 0].legend(loc="best", fontsize=8)
    axes[-1, 0].set_xlabel("t")
    return _save(fig, path)


def plot_sweep(path, t, series, param, bound=None):
    """``series`` maps a parameter value to a total-input series."""
    fig, ax = plt.subplots(figsize=(7, 3.5))
    for value, s in series.items():
        ax.step(t[:len(s)], s, where="post", label=f"{param} = {value:g}")
    if bound is not None:
        ax.axhline(bound, color="r", ls="--", lw=1)
    ax.set_xlabel("t")
    ax.set_ylabel("total input")
    ax.legend(loc="best", fontsize=8)
    return _save(fig, path)


def plot_residuals(path, k, per_agent, ylabel):
    fig, ax = plt.subplots(figsize=(7, 3.5))
    for i, s in enumerate(per_agent, start=1):
        ax.semilogy(k, s, label=f"agent {i}")
    ax.set_xlabel("iteration")
    ax.set_ylabel(ylabel)
    ax.legend(loc="best", fontsize=8)
    return _save(fig, path)
