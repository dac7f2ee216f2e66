"""Static figures for report series (Agg backend, reproducible bytes)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "lines.markersize": 4,
    "savefig.dpi": 120,
}


def render_series(series, path) -> None:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3.2))
        for name in sorted(series.columns):
            y = series.columns[name]
            err = series.errors.get(name)
            if err is not None:
                ax.errorbar(series.x, y, yerr=err, marker="o", capsize=2, label=name)
            else:
                ax.plot(series.x, y, marker="o", label=name)
        if series.logx:
            ax.set_xscale("log")
        if series.logy:
            ax.set_yscale("log")
        ax.set_xlabel(series.xlabel)
        ax.set_ylabel(series.ylabel)
        ax.set_title(series.title)
        if len(series.columns) > 1:
            ax.legend(frameon=False)
        fig.tight_layout()
        # no Software/date chunks, so reruns are byte-identical
        fig.savefig(path, format="png", metadata={"Software": None})
        plt.close(fig)
