"""Matplotlib renderings of the CSV reports (Agg backend, files only)."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

__all__ = ["plot_profile", "plot_mismatch", "plot_pareto", "plot_sparsity"]

_STYLE = {"axes.grid": True, "grid.linestyle": "--", "grid.alpha": 0.5, "font.size": 9, "figure.dpi": 120}


def _save(fig, path) -> None:
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def plot_profile(macs_by_component: dict, densities: list, frame_ms: list, budget_ms: float, path) -> None:
    """Three panels: MACs per component, activation sparsity per site, per-frame latency."""
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots(1, 3, figsize=(11, 3.4))
        names = list(macs_by_component)
        ax[0].bar(names, [float(v) for v in macs_by_component.values()], color="tab:blue")
        ax[0].set_ylabel("effective MACs / frame")
        ax[0].tick_params(axis="x", rotation=45)
        if densities:
            ax[1].bar([d[0] for d in densities], [d[1] for d in densities], color="tab:green")
            ax[1].tick_params(axis="x", rotation=70, labelsize=6)
        ax[1].set_ylabel("activation sparsity (%)")
        ax[1].set_ylim(0, 100)
        ax[2].plot(frame_ms, lw=0.8)
        ax[2].axhline(budget_ms, color="k", ls="--", lw=1)
        ax[2].set_xlabel("frame")
        ax[2].set_ylabel("compute time (ms)")
        _save(fig, path)


def plot_mismatch(report, path) -> None:
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots(2, 1, figsize=(8, 5), sharex=True)
        labels = [f"{r.layer}:{r.site}" for r in report.rows]
        x = range(len(labels))
        ax[0].bar(x, [r.mae for r in report.rows])
        ax[0].set_ylabel("MAE")
        ax[0].set_yscale("log")
        ax[1].bar(x, [r.mre for r in report.rows], color="tab:orange")
        ax[1].set_ylabel("MRE")
        ax[1].set_yscale("log")
        ax[1].set_xticks(list(x))
        ax[1].set_xticklabels(labels, rotation=80, fontsize=6)
        _save(fig, path)


def plot_pareto(rows: list, path) -> None:
    """rows: dicts with source, series, effective_macs, memory_mb, si_snr_db."""
    markers = {"measured": "o", "reference": "s"}
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots(1, 2, figsize=(10, 3.8))
        groups: dict = {}
        for r in rows:
            if r.get("effective_macs") in ("", None):
                continue
            groups.setdefault((r["source"], r["series"]), []).append(r)
        for (source, series), pts in sorted(groups.items()):
            pts.sort(key=lambda p: float(p["effective_macs"]))
            y = [float(p["si_snr_db"]) for p in pts]
            kw = dict(marker=markers.get(source, "x"), label=f"{series} ({source})")
            ax[0].plot([float(p["effective_macs"]) for p in pts], y, **kw)
            ax[1].plot([float(p["memory_mb"]) for p in pts], y, **kw)
        for r in rows:
            if r["series"] == "previous_sota":
                for a in ax:
                    a.axhline(float(r["si_snr_db"]), color="k", ls="--", lw=1)
        ax[0].set_xlabel("effective MACs / frame")
        ax[1].set_xlabel("memory (MB)")
        ax[0].set_ylabel("SI-SNR (dB)")
        ax[0].legend(fontsize=7)
        _save(fig, path)


def plot_sparsity(rows: list, path, reference: list | None = None) -> None:
    """rows/reference: (group, layer, sparsity %) triples."""
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots(figsize=(5, 3.4))
        groups = sorted({g for g, _, _ in rows}, key=["norm", "s5_out", "glu"].index)
        width = 0.8 / (len(groups) * (2 if reference else 1))
        for j, g in enumerate(groups):
            pts = [(layer, v) for gg, layer, v in rows if gg == g]
            ax.bar([p[0] + j * width for p in pts], [p[1] for p in pts], width, label=f"{g} (measured)")
            if reference:
                ref = [(layer, v) for gg, layer, v in reference if gg == g]
                ax.bar([p[0] + (len(groups) + j) * width for p in ref], [p[1] for p in ref], width,
                       hatch="//", alpha=0.6, label=f"{g} (reference)")
        ax.set_xlabel("layer")
        ax.set_ylabel("pre-activation sparsity (%)")
        ax.set_ylim(0, 100)
        ax.legend(fontsize=6)
        _save(fig, path)
