"""Figure rendering for evaluation reports and training logs."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

_METHOD_COLORS = {"movesd": "#2b6cb0", "random_walk": "#a0aec0", "markov": "#dd6b20"}


def render_metric_bars(report: dict, path: str) -> bool:
    """Grouped bars for whichever metrics the report carries; False if none."""
    methods = [m for m in ("movesd", "random_walk", "markov")
               if m in report.get("methods", {})]
    if not methods:
        return False
    acc_keys = [k for k in ("acc@1", "acc@3", "acc@5")
                if any(k in report["methods"][m] for m in methods)]
    err_keys = [k for k in ("ade", "fde")
                if any(k in report["methods"][m] for m in methods)]
    panels = [keys for keys in (acc_keys, err_keys) if keys]
    if not panels:
        return False

    fig, axes = plt.subplots(1, len(panels), figsize=(5.0 * len(panels), 3.4))
    if len(panels) == 1:
        axes = [axes]
    for ax, keys in zip(axes, panels):
        width = 0.8 / len(methods)
        for j, method in enumerate(methods):
            vals = [report["methods"][method].get(k, 0.0) or 0.0 for k in keys]
            xs = [i + j * width for i in range(len(keys))]
            ax.bar(xs, vals, width=width, label=method,
                   color=_METHOD_COLORS.get(method))
        ax.set_xticks([i + 0.4 - width / 2 for i in range(len(keys))])
        ax.set_xticklabels(keys)
        ax.set_ylabel("accuracy" if keys is acc_keys else "meters")
        ax.legend(fontsize=8)
    fig.suptitle(f"task: {report.get('task', '?')}")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return True


def render_training_curves(log_rows: list[dict], path: str):
    """2x2 panel of reward, discriminator loss, KL, and entropy over iterations."""
    its = [r["iteration"] for r in log_rows]
    panels = [("mean_reward", "mean combined reward"),
              ("d_loss", "discriminator objective"),
              ("kl", "policy step KL"),
              ("entropy", "action entropy")]
    fig, axes = plt.subplots(2, 2, figsize=(9, 6))
    for ax, (key, label) in zip(axes.ravel(), panels):
        ys = [r.get(key) for r in log_rows]
        ax.plot(its, ys, lw=1.2, color="#2b6cb0")
        ax.set_title(label, fontsize=9)
        ax.set_xlabel("iteration", fontsize=8)
        ax.tick_params(labelsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
