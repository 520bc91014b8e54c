"""Report figures: optimizer traces, the (K, L) grid and method comparisons.

All figures go through the Agg backend and are written without the
software/date metadata, so reruns produce byte-identical PNG files.
"""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "figure.dpi": 100,
    "savefig.dpi": 100,
}
WIDTH = 5.0
HEIGHT = 3.2


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, format="png", metadata={"Software": None})
    plt.close(fig)
    return path


def plot_anneal_trace(trace, path, title="simulated annealing"):
    """Rows are (iter, loglik, best_loglik, temperature)."""
    t = np.array(trace, dtype=float).reshape(-1, 4)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(WIDTH, HEIGHT))
        ax.plot(t[:, 0], t[:, 1], lw=0.8, color="0.6", label="current")
        ax.plot(t[:, 0], t[:, 2], lw=1.4, color="C0", label="best so far")
        ax.set_xlabel("iteration")
        ax.set_ylabel("log-likelihood")
        ax.set_title(title)
        ax2 = ax.twinx()
        ax2.plot(t[:, 0], t[:, 3], lw=0.8, ls="--", color="C3")
        ax2.set_ylabel("temperature", color="C3")
        ax2.grid(False)
        ax.legend(loc="lower right", frameon=False)
        return _save(fig, path)


def plot_em_trace(trace, path, title="EM"):
    """Rows are (round, expected_loglik, bp_rounds, bp_residual)."""
    t = np.array(trace, dtype=float).reshape(-1, 4)
    with plt.rc_context(STYLE):
        fig, (ax, ax2) = plt.subplots(1, 2, figsize=(1.6 * WIDTH, HEIGHT))
        ax.plot(t[:, 0], t[:, 1], marker=".", color="C0")
        ax.set_xlabel("round")
        ax.set_ylabel("expected log-likelihood")
        ax.set_title(title)
        ax2.semilogy(t[:, 0], np.maximum(t[:, 3], 1e-300), marker=".", color="C1")
        ax2.set_xlabel("round")
        ax2.set_ylabel("BP residual")
        return _save(fig, path)


def plot_history(history, path, title="LDL-NM training"):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(WIDTH, HEIGHT))
        train = history.get("train_loss", [])
        ax.plot(np.arange(1, len(train) + 1), train, color="C0", label="train (dropout)")
        hold = history.get("holdout_loss", [])
        if hold:
            ax.plot(np.arange(len(hold)), hold, color="C1", label="held out")
        ax.set_xlabel("epoch")
        ax.set_ylabel("loss")
        ax.set_title(title)
        ax.legend(frameon=False)
        return _save(fig, path)


def plot_grid(scores, path, title="dev mean KL"):
    """Heatmap of ``{(K, L): score}``; the selected cell is outlined."""
    Ks = sorted({k for k, _ in scores})
    Ls = sorted({v for _, v in scores})
    grid = np.full((len(Ks), len(Ls)), np.nan)
    for (k, v), s in scores.items():
        grid[Ks.index(k), Ls.index(v)] = s
    best = min(scores, key=lambda kl: (scores[kl], kl[0], kl[1]))
    with plt.rc_context({**STYLE, "axes.grid": False}):
        fig, ax = plt.subplots(figsize=(WIDTH, WIDTH * 0.8))
        im = ax.imshow(grid, origin="lower", cmap="viridis_r", aspect="auto")
        ax.set_xticks(range(len(Ls)), [str(v) for v in Ls])
        ax.set_yticks(range(len(Ks)), [str(k) for k in Ks])
        ax.set_xlabel("L (annotator clusters)")
        ax.set_ylabel("K (item clusters)")
        ax.add_patch(plt.Rectangle((Ls.index(best[1]) - 0.5, Ks.index(best[0]) - 0.5), 1, 1,
                                   fill=False, ec="red", lw=2))
        fig.colorbar(im, ax=ax, label=title)
        ax.set_title(f"{title}; best K={best[0]}, L={best[1]}")
        return _save(fig, path)


def plot_comparison(results, path, split="test"):
    """Bars of mean KL and accuracy per method; ``results`` maps name -> metrics dict."""
    names = list(results)
    kl = [results[n]["mean_kl"] for n in names]
    acc = [results[n]["accuracy"] for n in names]
    x = np.arange(len(names))
    with plt.rc_context(STYLE):
        fig, (ax, ax2) = plt.subplots(1, 2, figsize=(1.6 * WIDTH, HEIGHT))
        ax.bar(x, kl, color=[f"C{i}" for i in range(len(names))])
        ax.set_xticks(x, names)
        ax.set_ylabel(f"{split} mean KL")
        ax2.bar(x, acc, color=[f"C{i}" for i in range(len(names))])
        ax2.set_xticks(x, names)
        ax2.set_ylim(0, 1)
        ax2.set_ylabel(f"{split} accuracy")
        return _save(fig, path)
