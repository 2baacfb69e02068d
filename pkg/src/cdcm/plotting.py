"""Figures written next to the CLI's delimited outputs (Agg backend)."""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_STYLE = {
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.titlesize": 10,
    "axes.labelsize": 9,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "legend.fontsize": 8,
    "legend.frameon": False,
}


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def _panels(d, height=1.8):
    fig, axes = plt.subplots(d, 1, figsize=(7.0, height * d + 0.6), sharex=True, squeeze=False)
    return fig, axes[:, 0]


def plot_bold_fit(Y, pred, r, path, names=None, lo=None, hi=None):
    """Observed BOLD against the posterior-mean prediction, one panel per ROI."""
    Y = np.asarray(Y)
    n, d = Y.shape
    t = r * np.arange(1, n + 1)
    names = names or [f"ROI {i + 1}" for i in range(d)]
    with plt.rc_context(_STYLE):
        fig, axes = _panels(d)
        for i, ax in enumerate(axes):
            ax.plot(t, Y[:, i], color="0.55", lw=0.8, label="observed")
            if lo is not None and hi is not None:
                ax.fill_between(t, lo[:, i], hi[:, i], color="C0", alpha=0.2, lw=0)
            ax.plot(t, pred[:, i], color="C0", lw=1.4, label="posterior mean")
            ax.set_ylabel(names[i])
        axes[0].legend(loc="upper right", ncol=2)
        axes[-1].set_xlabel("time (s)")
        return _save(fig, path)


def plot_simulation(z, Y, mu, r, path, U=None):
    """Latent states, noise-free means and simulated BOLD."""
    n, d = Y.shape
    t_state = r * np.arange(n)
    t_scan = r * np.arange(1, n + 1)
    with plt.rc_context(_STYLE):
        fig, axes = _panels(d)
        for i, ax in enumerate(axes):
            if U is not None:
                for k in range(U.shape[1]):
                    on = np.asarray(U[:, k], dtype=bool)
                    ax.fill_between(t_state, 0, 1, where=on, step="post", color=f"C{k + 2}",
                                    alpha=0.12, lw=0, transform=ax.get_xaxis_transform())
            ax.plot(t_state, z[:, i], color="C1", lw=1.0, label="z")
            ax.plot(t_scan, mu[:, i], color="C0", lw=1.2, label="mu")
            ax.plot(t_scan, Y[:, i], color="0.5", lw=0.6, label="Y")
            ax.set_ylabel(f"ROI {i + 1}")
        axes[0].legend(loc="upper right", ncol=3)
        axes[-1].set_xlabel("time (s)")
        return _save(fig, path)


def plot_forest(labels, mean, lo, hi, path, title=None):
    """Horizontal interval plot, e.g. group intercepts with HPD bars."""
    k = len(labels)
    y = np.arange(k)[::-1]
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots(figsize=(5.0, 0.3 * k + 1.0))
        ax.axvline(0.0, color="0.7", lw=0.8)
        ax.hlines(y, lo, hi, color="C0", lw=1.5)
        ax.plot(mean, y, "o", color="C0", ms=4)
        ax.set_yticks(y)
        ax.set_yticklabels(labels)
        if title:
            ax.set_title(title)
        return _save(fig, path)


def plot_traces(names, draws, chain, path, max_params=6):
    """Trace plots of the first few parameters, coloured by chain."""
    P = min(len(names), max_params)
    with plt.rc_context(_STYLE):
        fig, axes = _panels(P, height=1.2)
        for j, ax in enumerate(axes):
            for c in np.unique(chain):
                sel = chain == c
                ax.plot(draws[sel, j], lw=0.4, alpha=0.8)
            ax.set_ylabel(names[j], rotation=0, ha="right")
        axes[-1].set_xlabel("draw")
        return _save(fig, path)


def plot_bench(labels, seconds, path):
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots(figsize=(4.0, 2.5))
        ax.bar(labels, seconds, color=["C0", "C1"][:len(labels)])
        ax.set_ylabel("seconds per trajectory")
        return _save(fig, path)
