"""Static SVG summaries drawn from report tables.

Output is byte-stable: the SVG hash salt is fixed and no date metadata is
written.
"""

from __future__ import annotations

import io

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .dataio import atomic_write_text  # noqa: E402

LABEL_COLORS = {"signal": "#4c72b0", "noise": "#c44e52", "": "#8c8c8c"}


def _save(fig, path):
    buf = io.StringIO()
    with plt.rc_context({"svg.hashsalt": "icaenc", "svg.fonttype": "none"}):
        fig.savefig(buf, format="svg", metadata={"Date": None, "Creator": None})
    plt.close(fig)
    atomic_write_text(path, buf.getvalue())


def predictivity_bars(r, labels, path, title="Test-story predictivity"):
    """Components ranked by test r, colored by artifact label."""
    r = np.asarray(r, dtype=float)
    order = np.lexsort((np.arange(r.size), -r))
    fig, ax = plt.subplots(figsize=(max(4.0, 0.25 * r.size + 2), 3.2))
    colors = [LABEL_COLORS.get(labels[i] if labels else "", "#8c8c8c") for i in order]
    ax.bar(np.arange(r.size), r[order], color=colors)
    ax.set_xticks(np.arange(r.size))
    ax.set_xticklabels([str(i) for i in order], fontsize=7, rotation=90)
    ax.set_xlabel("component (ranked)")
    ax.set_ylabel("Pearson r")
    ax.axhline(0.0, color="black", linewidth=0.6)
    ax.set_title(title)
    fig.tight_layout()
    _save(fig, path)


def grouped_bars(groups, series, path, ylabel="Pearson r", title="", errors=None):
    """Bars for ``series`` (name -> values per group) side by side per group."""
    names = list(series)
    width = 0.8 / max(1, len(names))
    x = np.arange(len(groups))
    fig, ax = plt.subplots(figsize=(max(4.0, 1.2 * len(groups) + 2), 3.2))
    for i, name in enumerate(names):
        err = None if errors is None else errors.get(name)
        ax.bar(x + (i - (len(names) - 1) / 2) * width, series[name], width, label=name, yerr=err, capsize=3)
    ax.set_xticks(x)
    ax.set_xticklabels(groups)
    ax.set_ylabel(ylabel)
    ax.axhline(0.0, color="black", linewidth=0.6)
    if title:
        ax.set_title(title)
    ax.legend(fontsize=7)
    fig.tight_layout()
    _save(fig, path)
