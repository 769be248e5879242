"""Figures for the ``report`` command. Everything renders off-screen to files."""

from __future__ import annotations

from pathlib import Path
from typing import Dict, List, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "figure.dpi": 120,
    "savefig.bbox": "tight",
    "font.size": 9,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
}
MARKERS = ("o", "s", "^", "D", "v", "P")


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp")
    fig.savefig(tmp, format=path.suffix.lstrip(".") or "png")
    plt.close(fig)
    tmp.replace(path)
    return path


def training_curves(rows: Sequence, path) -> Path:
    """Test accuracy and alive-masked costs (relative to the first eval point) against step."""
    steps = [r.step for r in rows]
    with plt.rc_context(STYLE):
        fig, (ax_acc, ax_cost) = plt.subplots(1, 2, figsize=(8, 3))
        ax_acc.plot(steps, [r.eval_accuracy for r in rows], marker="o", ms=3)
        ax_acc.set_xlabel("step")
        ax_acc.set_ylabel("test accuracy (%)")
        f0 = rows[0].alive_flop_cost or 1
        p0 = rows[0].alive_param_cost or 1
        ax_cost.plot(steps, [r.alive_flop_cost / f0 for r in rows], label="FLOP", marker="o", ms=3)
        ax_cost.plot(steps, [r.alive_param_cost / p0 for r in rows], label="PARAM", marker="s", ms=3)
        ax_cost.set_xlabel("step")
        ax_cost.set_ylabel("alive cost / first eval")
        ax_cost.legend(frameon=False)
        return _save(fig, path)


def tradeoff(aggregate: List[Dict], path) -> Path:
    """Pruned accuracy against RED (FLOP and PARAM) per partition, with std error bars."""
    parts = list(dict.fromkeys(r["partition"] for r in aggregate))
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 2, figsize=(8, 3), sharey=True)
        for i, part in enumerate(parts):
            group = sorted((r for r in aggregate if r["partition"] == part), key=lambda r: float(r["alpha"]))
            acc = [float(r["acc_pruned_mean"]) for r in group]
            acc_sd = [float(r["acc_pruned_std"]) for r in group]
            for ax, col in zip(axes, ("red_flop", "red_param")):
                ax.errorbar([float(r[f"{col}_mean"]) for r in group], acc,
                            xerr=[float(r[f"{col}_std"]) for r in group], yerr=acc_sd,
                            marker=MARKERS[i % len(MARKERS)], ms=4, capsize=2, label=part)
        axes[0].set_xlabel("RED FLOP (%)")
        axes[1].set_xlabel("RED PARAM (%)")
        axes[0].set_ylabel("pruned test accuracy (%)")
        axes[1].legend(frameon=False)
        return _save(fig, path)


def stage_drop(rows: List[Dict], path) -> Path:
    stages = [r for r in rows if r["stage"] != "total"]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4, 3))
        ax.bar([r["stage"] for r in stages], [float(r["drop_pct"]) for r in stages], color="0.4")
        ax.set_ylabel("dropped channels (%)")
        ax.set_ylim(0, 100)
        return _save(fig, path)
