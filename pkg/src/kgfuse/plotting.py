"""Matplotlib rendering of sweep results (file output only, Agg backend)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "savefig.dpi": 150,
}


def plot_sweep(result, path, title: str | None = None) -> Path:
    """Accuracy against the swept value; thin lines per seed, bold mean."""
    path = Path(path)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5.0, 3.2))
        colors = plt.rcParams["axes.prop_cycle"].by_key()["color"]
        for k, var in enumerate(result.variables()):
            color = colors[k % len(colors)]
            cells = [c for c in result.cells if c.variable == var]
            for s in sorted({c.seed for c in cells}):
                pts = sorted((c.value, c.accuracy) for c in cells if c.seed == s)
                ax.plot([p[0] for p in pts], [p[1] for p in pts], color=color, alpha=0.35, lw=0.8)
            means = result.mean_accuracy(var)
            ax.plot(list(means), list(means.values()), color=color, lw=2, marker="o", ms=3, label=var)
        values = sorted({c.value for c in result.cells})
        if values and min(values) > 0 and max(values) / min(values) > 50:
            ax.set_xscale("log")
        ax.set_xlabel(result.variable)
        ax.set_ylabel("entity accuracy (QA proxy)")
        ax.set_ylim(0, 1)
        ax.set_title(title or f"{result.variable} sweep")
        if len(result.variables()) > 1:
            ax.legend(frameon=False, fontsize=7)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return path
