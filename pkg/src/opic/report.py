"""Figure rendering for evaluation outputs.

Reads the JSON/CSV files an `opic eval` run produced and writes PNG figures
next to them: mean Dice AUC per task and source, subject-identification
accuracy, and the mean Dice curves.  matplotlib stays confined to this module
so the numeric core carries no plotting dependency.
"""

from __future__ import annotations

import csv
import json
from collections import defaultdict
from pathlib import Path

from .errors import DataError

_SOURCE_ORDER = ["opic_id", "opic_ood", "opic_ood_seen", "bsc_id",
                 "group_average", "linear_regression", "retest"]
_LABELS = {
    "opic_id": "model (in-domain)",
    "opic_ood": "model (out-of-domain)",
    "opic_ood_seen": "model (new task, seen group)",
    "bsc_id": "per-task-channel net",
    "group_average": "group average",
    "linear_regression": "linear regression",
    "retest": "retest",
}


def _ordered(names) -> list[str]:
    known = [n for n in _SOURCE_ORDER if n in names]
    return known + sorted(set(names) - set(known))


def render_report(eval_dir, out_dir) -> list[Path]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    eval_dir, out_dir = Path(eval_dir), Path(out_dir)
    report_path = eval_dir / "report.json"
    if not report_path.exists():
        raise DataError(f"no report.json in {eval_dir}; run `opic eval` first")
    report = json.loads(report_path.read_text())
    out_dir.mkdir(parents=True, exist_ok=True)
    tasks = sorted(report["tasks"])
    written: list[Path] = []

    # mean AUC per task and source
    names = _ordered({n for t in tasks for n in report["tasks"][t]["sources"]})
    fig, ax = plt.subplots(figsize=(max(7, 1.1 * len(tasks)), 4.2))
    width = 0.8 / len(names)
    for i, name in enumerate(names):
        xs, ys = [], []
        for j, task in enumerate(tasks):
            src = report["tasks"][task]["sources"].get(name)
            if src:
                xs.append(j + (i - len(names) / 2 + 0.5) * width)
                ys.append(src["mean_auc"])
        ax.bar(xs, ys, width=width, label=_LABELS.get(name, name))
    ax.set_xticks(range(len(tasks)))
    ax.set_xticklabels(tasks, rotation=45, ha="right")
    ax.set_ylabel("mean Dice AUC")
    ax.set_title("Prediction overlap with observed maps")
    ax.legend(fontsize=7, ncol=2)
    fig.tight_layout()
    p = out_dir / "auc_by_task.png"
    fig.savefig(p, dpi=150)
    plt.close(fig)
    written.append(p)

    # identification accuracy (normalized top-1) per task and source
    id_names = _ordered({n for t in tasks for n in report["tasks"][t]["identification"]})
    if id_names:
        fig, ax = plt.subplots(figsize=(max(7, 1.1 * len(tasks)), 4.2))
        width = 0.8 / len(id_names)
        for i, name in enumerate(id_names):
            xs, ys = [], []
            for j, task in enumerate(tasks):
                ident = report["tasks"][task]["identification"].get(name)
                if ident:
                    xs.append(j + (i - len(id_names) / 2 + 0.5) * width)
                    ys.append(ident["top1"])
            ax.bar(xs, ys, width=width, label=_LABELS.get(name, name))
        n_subj = len(report["subjects"])
        ax.axhline(1.0 / n_subj, color="k", ls="--", lw=0.8, label="chance")
        ax.set_xticks(range(len(tasks)))
        ax.set_xticklabels(tasks, rotation=45, ha="right")
        ax.set_ylabel("top-1 identification accuracy")
        ax.set_title("Subject identification (column-standardized)")
        ax.legend(fontsize=7, ncol=2)
        fig.tight_layout()
        p = out_dir / "identification.png"
        fig.savefig(p, dpi=150)
        plt.close(fig)
        written.append(p)

    # mean dice curves
    curves_path = eval_dir / "dice_curves.csv"
    if curves_path.exists():
        curves: dict[tuple[str, str], list[tuple[float, float]]] = defaultdict(list)
        with open(curves_path) as f:
            for row in csv.DictReader(f):
                curves[(row["task"], row["source"])].append(
                    (float(row["threshold"]), float(row["dice"])))
        ncols = min(4, len(tasks))
        nrows = (len(tasks) + ncols - 1) // ncols
        fig, axes = plt.subplots(nrows, ncols, figsize=(3.0 * ncols, 2.4 * nrows),
                                 sharex=True, sharey=True, squeeze=False)
        for j, task in enumerate(tasks):
            ax = axes[j // ncols][j % ncols]
            for name in _ordered({s for (t, s) in curves if t == task}):
                pts = sorted(curves[(task, name)])
                ax.plot([x for x, _ in pts], [y for _, y in pts],
                        label=_LABELS.get(name, name), lw=1.0)
            ax.set_title(task, fontsize=8)
        for j in range(len(tasks), nrows * ncols):
            axes[j // ncols][j % ncols].axis("off")
        axes[0][0].legend(fontsize=5)
        fig.supxlabel("top-X% threshold")
        fig.supylabel("Dice")
        fig.tight_layout()
        p = out_dir / "dice_curves.png"
        fig.savefig(p, dpi=150)
        plt.close(fig)
        written.append(p)

    return written
