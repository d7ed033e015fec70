"""Headless figure rendering for batch outputs.

Each function takes plain rows or arrays, writes one PNG next to the
delimited artifact it illustrates, and returns the path. The backend is
forced to Agg before pyplot loads so rendering works without a display.
"""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .errors import ValidationError

_DPI = 120


def _finish(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)
    return str(path)


def history_figure(path, history):
    """Training curve: batch loss and validation RMSE per evaluation."""
    if not history:
        raise ValidationError("cannot plot an empty training history")
    steps, train_loss, val = (np.asarray(col, dtype=np.float64)
                              for col in zip(*history))
    fig, ax = plt.subplots(figsize=(6.4, 3.6))
    ax.plot(steps, train_loss, color="tab:blue", label="train batch loss")
    ax.plot(steps, val, color="tab:orange", label="validation RMSE")
    ax.set_xlabel("step")
    ax.set_ylabel("normalized error")
    ax.legend(frameon=False)
    return _finish(fig, path)


def predictions_figure(path, rows, horizon=None, max_nodes=3):
    """Truth vs prediction over time for a few nodes at one horizon step.

    `rows` are (t0, horizon, node, pred, truth) records; `horizon`
    defaults to the farthest step present.
    """
    if not rows:
        raise ValidationError("no prediction rows to plot")
    arr = np.asarray(rows, dtype=np.float64)
    horizons = np.unique(arr[:, 1])
    pick = float(horizons.max()) if horizon is None else float(horizon)
    if pick not in horizons:
        raise ValidationError(
            f"horizon {horizon} absent from rows (have {horizons.tolist()})")
    sel = arr[arr[:, 1] == pick]
    fig, ax = plt.subplots(figsize=(7.2, 3.6))
    for node in np.unique(sel[:, 2]).astype(int)[:max_nodes]:
        part = sel[sel[:, 2] == node]
        order = np.argsort(part[:, 0])
        line, = ax.plot(part[order, 0], part[order, 4],
                        label=f"node {node} truth")
        ax.plot(part[order, 0], part[order, 3], linestyle="--",
                color=line.get_color(), label=f"node {node} predicted")
    ax.set_xlabel("anchor slice")
    ax.set_ylabel("speed")
    ax.set_title(f"{int(pick)} steps ahead")
    ax.legend(frameon=False, fontsize="small", ncols=2)
    return _finish(fig, path)


def metrics_figure(path, report):
    """MAE and RMSE against the forecast horizon in minutes."""
    minutes = report.get("horizon_minutes", [])
    if not minutes:
        raise ValidationError("metrics report has no horizon buckets")
    fig, ax = plt.subplots(figsize=(6.4, 3.6))
    ax.plot(minutes, report["mae"], marker="o", label="MAE")
    ax.plot(minutes, report["rmse"], marker="s", label="RMSE")
    ax.set_xlabel("horizon (minutes)")
    ax.set_ylabel("error (speed units)")
    ax.set_xticks(minutes)
    ax.legend(frameon=False)
    return _finish(fig, path)


def ablation_figure(path, rows):
    """Grouped bars: test RMSE per granularity mode and horizon.

    `rows` are (mode, horizon_minutes, mae, rmse) records covering a full
    mode-by-horizon grid.
    """
    if not rows:
        raise ValidationError("no ablation rows to plot")
    lookup = {(mode, minutes): rmse for mode, minutes, _, rmse in rows}
    modes = sorted({mode for mode, _ in lookup})
    horizons = sorted({minutes for _, minutes in lookup})
    missing = [(m, hm) for m in modes for hm in horizons
               if (m, hm) not in lookup]
    if missing:
        raise ValidationError(f"ablation grid is ragged, missing {missing}")
    x = np.arange(len(modes))
    width = 0.8 / len(horizons)
    fig, ax = plt.subplots(figsize=(6.4, 3.6))
    for k, minutes in enumerate(horizons):
        offset = (k - (len(horizons) - 1) / 2.0) * width
        ax.bar(x + offset, [lookup[(m, minutes)] for m in modes],
               width=width, label=f"{minutes} min")
    ax.set_xticks(x)
    ax.set_xticklabels(modes)
    ax.set_xlabel("granularity mode")
    ax.set_ylabel("test RMSE (speed units)")
    ax.legend(frameon=False)
    return _finish(fig, path)
