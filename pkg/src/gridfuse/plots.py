"""Report figures rendered next to the delimited output.

Only the CLI report path imports this module, keeping matplotlib out of
the estimation core. Figures are derived purely from the scored rows, so
they can be re-rendered from a stored estimates.csv at any time.
"""

from __future__ import annotations

from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def render_figures(rows, metrics_doc: dict, out_dir) -> list:
    """Render every figure the rows support; returns the written paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    p = _nrmse_bars(metrics_doc, out / "nrmse_comparison.png")
    if p:
        written.append(p)
    p = _soc_error_series(rows, out / "soc_abs_error.png")
    if p:
        written.append(p)
    p = _param_error_box(rows, out / "param_error_box.png")
    if p:
        written.append(p)
    return written


def _nrmse_bars(metrics_doc, path):
    table = metrics_doc.get("nrmse", {})
    if not table:
        return None
    families = sorted(table)
    setups = sorted({s for fam in table.values() for s in fam})
    fig, ax = plt.subplots(figsize=(1.2 + 1.1 * len(families), 3.4))
    width = 0.8 / max(len(setups), 1)
    xs = np.arange(len(families))
    for i, setup in enumerate(setups):
        vals = [table[f].get(setup, np.nan) for f in families]
        ax.bar(xs + i * width, vals, width, label=setup)
    ax.set_yscale("log")
    ax.set_xticks(xs + width * (len(setups) - 1) / 2)
    ax.set_xticklabels(families, rotation=30, ha="right")
    ax.set_ylabel("NRMSE")
    ax.legend()
    ax.set_title("Estimation accuracy by state family")
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
    return path


def _soc_error_series(rows, path):
    soc = [r for r in rows if r.family == "v_soc"]
    if not soc or max(r.step for r in soc) < 2:
        return None
    series = defaultdict(lambda: defaultdict(list))
    for r in soc:
        if r.truth:
            series[(r.setup, r.component)][r.step].append(
                abs((r.estimate - r.truth) / r.truth * 100.0)
            )
    fig, ax = plt.subplots(figsize=(6.0, 3.4))
    for (setup, comp), per_step in sorted(series.items()):
        steps = sorted(per_step)
        ax.plot(steps, [np.mean(per_step[s]) for s in steps],
                label=f"{comp} ({setup})")
    ax.set_xlabel("step")
    ax.set_ylabel("abs. SoC error (%)")
    ax.legend(fontsize=8)
    ax.set_title("State-of-charge error accumulation")
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
    return path


def _param_error_box(rows, path):
    params = [r for r in rows if r.family == "params"]
    if not params:
        return None
    buckets = defaultdict(list)
    for r in params:
        buckets[(r.component, r.setup)].append(
            (r.estimate - r.truth) / r.truth * 100.0
        )
    labels = [f"{c}\n{s}" for c, s in sorted(buckets)]
    data = [buckets[k] for k in sorted(buckets)]
    fig, ax = plt.subplots(figsize=(1.5 + 1.2 * len(data), 3.4))
    ax.boxplot(data, tick_labels=labels)
    ax.axhline(0.0, color="gray", lw=0.7)
    ax.set_ylabel("parameter error (%)")
    ax.set_title("Unknown-parameter estimation error")
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
    return path
