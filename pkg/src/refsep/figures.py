"""Figure rendering for the report-producing commands.

Everything draws through the Agg backend straight to files; nothing here
opens a window. Each renderer takes the already-computed report data, so the
benchmark stays import-light.
"""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def render_bench_psnr(report, path):
    """Grouped bars of mean PSNR with standard-error whiskers."""
    keys = sorted(report.methods)
    cells = sorted({cell for _, cell in keys})
    methods = sorted({m for m, _ in keys})
    width = 0.8 / max(len(methods), 1)
    fig, ax = plt.subplots(figsize=(6, 4))
    for mi, method in enumerate(methods):
        xs, ys, es = [], [], []
        for ci, cell in enumerate(cells):
            s = report.methods.get((method, cell))
            if s is None or s["n"] == 0:
                continue
            xs.append(ci + mi * width)
            ys.append(s["mean"])
            es.append(s["se"])
        ax.bar(xs, ys, width=width, yerr=es, capsize=3, label=method)
    ax.set_xticks(np.arange(len(cells)) + 0.4 - width / 2)
    ax.set_xticklabels([f"cell={c}" for c in cells])
    ax.set_ylabel("mean PSNR (dB)")
    ax.set_title("separation accuracy by annotation density")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_candidate_curve(curve, path):
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.errorbar(curve["ns"], curve["mean_db"], yerr=curve["se_db"],
                marker="o", capsize=3)
    ax.set_xscale("log")
    ax.set_xlabel("candidates kept (N)")
    ax.set_ylabel("mean best-of-N PSNR (dB)")
    ax.set_title("candidate accuracy")
    ax.grid(True, which="both", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_gradient_hist(stats, path):
    edges = stats["histogram_edges"]
    centers = (edges[:-1] + edges[1:]) / 2
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.semilogy(centers, np.maximum(stats["histogram"], 0.5), drawstyle="steps-mid")
    ax.set_xlabel("vertical gradient")
    ax.set_ylabel("pixel count")
    ax.set_title(f"gradient histogram "
                 f"(|grad| > 0.1 on {stats['overall_fraction']:.1%} of pixels)")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_objective_trace(trace, path):
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(np.arange(len(trace)), trace, marker=".")
    ax.set_xlabel("outer iteration")
    ax.set_ylabel("objective")
    ax.set_title("separation objective trace")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
