"""Optional PNG figures next to the CSV output (``--plot``). Needs matplotlib;
the Agg backend is forced so no display is required."""
from __future__ import annotations

import os

import numpy as np

from .errors import InputError


def _plt():
    try:
        import matplotlib
    except ImportError:
        raise InputError("--plot needs matplotlib (pip install 'artifact[plot]')") from None
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    return plt


def _save(fig, path):
    # fixed metadata keeps reruns byte-identical
    fig.savefig(path, dpi=110, metadata={"Software": None})
    fig.clf()


def plot_solution(outdir, t, P, gain, offset, a, b):
    plt = _plt()
    fig, ax = plt.subplots(1, 3, figsize=(12, 3.4), constrained_layout=True)
    n, m = a.shape[1], b.shape[1]
    for i in range(n):
        ax[0].plot(t, P[:, i, i], label=f"P[{i + 1},{i + 1}]")
    ax[0].set_title("Riccati diagonal")
    for j in range(m):
        for i in range(n):
            ax[1].plot(t, gain[:, j, i], label=f"K[{j + 1},{i + 1}]")
        ax[1].plot(t, offset[:, j], "--", label=f"k[{j + 1}]")
    ax[1].set_title("feedback gain / offset")
    for i in range(n):
        ax[2].plot(t, a[:, i], label=f"a{i + 1} = E[X{i + 1}]")
    for j in range(m):
        ax[2].plot(t, b[:, j], "--", label=f"b{j + 1} = E[u{j + 1}]")
    ax[2].set_title("optimal means")
    for x in ax:
        x.set_xlabel("t")
        x.legend(fontsize=7)
    path = os.path.join(outdir, "solution.png")
    _save(fig, path)
    plt.close(fig)
    return path


def plot_paths(outdir, t, X, mean, se, max_paths=20):
    plt = _plt()
    n = X.shape[2]
    fig, ax = plt.subplots(1, n, figsize=(5 * n, 3.4), constrained_layout=True, squeeze=False)
    for i in range(n):
        a = ax[0, i]
        for p in range(min(max_paths, X.shape[0])):
            a.plot(t, X[p, :, i], lw=0.6, alpha=0.5, color="0.4")
        a.plot(t, mean[:, i], color="C0", label="mean")
        a.fill_between(t, mean[:, i] - 3 * se[:, i], mean[:, i] + 3 * se[:, i], color="C0", alpha=0.25,
                       label="mean +- 3 SE")
        a.set_xlabel("t")
        a.set_title(f"X{i + 1}")
        a.legend(fontsize=7)
    path = os.path.join(outdir, "paths.png")
    _save(fig, path)
    plt.close(fig)
    return path


def plot_oracle(outdir, levels):
    plt = _plt()
    dt = np.array([l["dt"] for l in levels])
    gap = np.array([l["gap"] for l in levels])
    fig, ax = plt.subplots(1, 2, figsize=(9, 3.4), constrained_layout=True)
    ax[0].plot(dt, [l["oracle_cost"] for l in levels], "o-", label="oracle")
    ax[0].plot(dt, [l["feedback_cost"] for l in levels], "s--", label="feedback in tree")
    ax[0].set_xlabel("dt")
    ax[0].set_title("tree cost")
    ax[0].legend(fontsize=7)
    pos = gap > 0
    ax[1].loglog(dt[pos], gap[pos], "o-")
    ax[1].set_xlabel("dt")
    ax[1].set_title("feedback - oracle")
    path = os.path.join(outdir, "oracle.png")
    _save(fig, path)
    plt.close(fig)
    return path
