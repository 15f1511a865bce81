"""Report rendering: plain-text tables, key=value files, TSVs, and figures.

Every report directory gets the delimited outputs plus matplotlib figures
rendered to static image files; there is no interactive plotting path.
"""
from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

import numpy as np  # noqa: E402

from .metrics import ScoreReport  # noqa: E402


def _write_kv(path: str, pairs: dict):
    with open(path, "w") as f:
        for k, v in pairs.items():
            f.write(f"{k}={v}\n")


def write_score_report(report: ScoreReport, out_dir: str, name: str = "report"):
    """Text table + key/value file + per-sample TSV + histogram figure."""
    os.makedirs(out_dir, exist_ok=True)
    metrics = list(report.means)
    width = max(len(m) for m in metrics)
    lines = [f"{'metric'.ljust(width)}  mean", "-" * (width + 10)]
    for m in metrics:
        lines.append(f"{m.ljust(width)}  {report.means[m]:8.3f}")
    n = len(next(iter(report.per_sample.values())))
    lines.append(f"samples: {n}")
    for m, count in report.vacuous.items():
        if count:
            lines.append(f"vacuous {m}: {count}")
    with open(os.path.join(out_dir, f"{name}.txt"), "w") as f:
        f.write("\n".join(lines) + "\n")

    kv = {f"mean.{m}": f"{report.means[m]:.6f}" for m in metrics}
    kv["samples"] = n
    for m, dist in report.distributions.items():
        if dist.skewness is not None:
            kv[f"skewness.{m}"] = f"{dist.skewness:.6f}"
        kv[f"zero_fraction.{m}"] = f"{dist.zero_fraction:.6f}"
    _write_kv(os.path.join(out_dir, f"{name}.kv"), kv)

    with open(os.path.join(out_dir, f"{name}_per_sample.tsv"), "w") as f:
        f.write("idx\t" + "\t".join(metrics) + "\n")
        for i in range(n):
            f.write(str(i) + "\t"
                    + "\t".join(f"{report.per_sample[m][i]:.4f}" for m in metrics)
                    + "\n")

    figures = []
    for m, dist in report.distributions.items():
        fig, ax = plt.subplots(figsize=(6, 4))
        centers = 0.5 * (dist.bin_edges[:-1] + dist.bin_edges[1:])
        ax.bar(centers, dist.counts, width=np.diff(dist.bin_edges), align="center",
               edgecolor="black", linewidth=0.4)
        skew = "undefined" if dist.skewness is None else f"{dist.skewness:.2f}"
        ax.set_xlabel(f"{m} score")
        ax.set_ylabel("count")
        ax.set_title(f"{m} distribution (skewness {skew}, "
                     f"zero fraction {dist.zero_fraction:.2f})")
        fig.tight_layout()
        path = os.path.join(out_dir, f"{name}_hist_{m.replace('@', '')}.png")
        fig.savefig(path, dpi=120)
        plt.close(fig)
        figures.append(path)
    return figures


def write_comparison(rows, out_dir: str, name: str, metrics=("C", "M", "B@4")):
    """Comparison table over labelled runs plus a grouped bar figure.

    ``rows`` is a list of (label, means-dict) pairs.
    """
    os.makedirs(out_dir, exist_ok=True)
    labels = [label for label, _ in rows]
    width = max(max((len(l) for l in labels), default=8), 8)
    header = f"{'run'.ljust(width)}  " + "  ".join(f"{m:>8}" for m in metrics)
    lines = [header, "-" * len(header)]
    for label, means in rows:
        cells = "  ".join(f"{means.get(m, float('nan')):8.3f}" for m in metrics)
        lines.append(f"{label.ljust(width)}  {cells}")
    with open(os.path.join(out_dir, f"{name}.txt"), "w") as f:
        f.write("\n".join(lines) + "\n")

    kv = {}
    for label, means in rows:
        for m, v in means.items():
            kv[f"{label}.{m}"] = f"{v:.6f}"
    _write_kv(os.path.join(out_dir, f"{name}.kv"), kv)

    fig, ax = plt.subplots(figsize=(7, 4))
    x = np.arange(len(labels))
    bar_w = 0.8 / len(metrics)
    for j, m in enumerate(metrics):
        vals = [means.get(m, np.nan) for _, means in rows]
        ax.bar(x + j * bar_w, vals, bar_w, label=m)
    ax.set_xticks(x + 0.4 - bar_w / 2)
    ax.set_xticklabels(labels, rotation=20, ha="right")
    ax.set_ylabel("score")
    ax.set_title(name)
    ax.legend()
    fig.tight_layout()
    path = os.path.join(out_dir, f"{name}.png")
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
