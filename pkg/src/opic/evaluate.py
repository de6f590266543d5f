"""Report assembly: per-task AUC tables, identification, scenario orderings.

Model predictions come in as named sources keyed by (subject, task); the
baseline sources (group average, per-parcel regression, retest) are derived
from the cohort here so every report compares against the same references.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field as dataclass_field

import numpy as np

from .baselines import fit_linear_baseline, group_average_predict, linreg_predict
from .errors import DataError
from .metrics import (
    DEFAULT_THRESHOLDS,
    dice_auc,
    dice_curve,
    identification_accuracy,
    identification_matrix,
    normalize_id_matrix,
    paired_ttest,
    predictable_filter,
)
from .synthdata import Cohort

log = logging.getLogger(__name__)

__all__ = ["EvalReport", "build_report", "BASELINE_SOURCES"]

BASELINE_SOURCES = ("group_average", "linear_regression", "retest")


@dataclass
class EvalReport:
    """JSON-ready summary plus the raw identification matrices."""

    data: dict
    id_matrices: dict = dataclass_field(default_factory=dict)  # (task, source) -> (N, N)
    mean_curves: dict = dataclass_field(default_factory=dict)  # (task, source) -> (thresholds, dice)

    def to_json(self) -> str:
        return json.dumps(self.data, sort_keys=True, indent=1)


def _subject_aucs(preds: dict, subjects, task: str, targets: dict,
                  thresholds) -> tuple[list[float], np.ndarray]:
    aucs, curves = [], []
    for sid in subjects:
        curve = dice_curve(preds[(sid, task)], targets[sid], thresholds)
        aucs.append(dice_auc(curve))
        curves.append(curve.dice)
    return aucs, np.mean(curves, axis=0)


def build_report(cohort: Cohort, model_sources: dict[str, dict],
                 thresholds=DEFAULT_THRESHOLDS) -> EvalReport:
    """Evaluate model prediction sources against targets and baselines.

    `model_sources` maps a source name (e.g. "opic_id", "opic_ood", "bsc_id")
    to a dict keyed by (subject id, task id).  A source may cover only a
    subset of tasks; it is evaluated wherever it covers all test subjects.
    """
    test_subjects = cohort.subjects_in("test")
    if not test_subjects:
        raise DataError("cohort has no test subjects")
    sids = [s.id for s in test_subjects]
    tasks = cohort.task_ids()

    linmodel = fit_linear_baseline(cohort)
    sources: dict[str, dict] = {name: dict(preds) for name, preds in model_sources.items()}
    sources["group_average"] = {
        (sid, t): group_average_predict(t, cohort) for sid in sids for t in tasks
    }
    sources["linear_regression"] = {
        (s.id, t): linreg_predict(linmodel, s, t) for s in test_subjects for t in tasks
    }
    sources["retest"] = {
        (s.id, t): s.retests[t] for s in test_subjects for t in tasks if t in s.retests
    }

    targets = {t: {s.id: s.contrasts[t] for s in test_subjects} for t in tasks}

    report: dict = {
        "subjects": sids,
        "tasks": {},
        "thresholds": list(map(float, thresholds)),
        "source_names": sorted(sources),
    }
    id_matrices, mean_curves = {}, {}

    for task in tasks:
        entry: dict = {"group": cohort.group_of(task), "n_subjects": len(sids),
                       "sources": {}, "identification": {}, "ttests": {}}
        per_subject: dict[str, list[float]] = {}
        for name, preds in sources.items():
            if not all((sid, task) in preds for sid in sids):
                continue
            aucs, curve = _subject_aucs(preds, sids, task, targets[task], thresholds)
            per_subject[name] = aucs
            mean_curves[(task, name)] = (np.asarray(thresholds, dtype=float), curve)
            entry["sources"][name] = {
                "mean_auc": float(np.mean(aucs)),
                "per_subject_auc": [float(a) for a in aucs],
            }
            if name != "group_average":  # constant across subjects: no identification signal
                m = identification_matrix([preds[(sid, task)] for sid in sids],
                                          [targets[task][sid] for sid in sids], thresholds)
                mn = normalize_id_matrix(m)
                top1_raw, rank_raw = identification_accuracy(m)
                top1, rank = identification_accuracy(mn)
                id_matrices[(task, name)] = m.data
                entry["identification"][name] = {
                    "top1": top1, "mean_rank": rank,
                    "top1_raw": top1_raw, "mean_rank_raw": rank_raw,
                }
        for name in per_subject:
            if name in BASELINE_SOURCES or name == "bsc_id":
                continue
            for ref in (*BASELINE_SOURCES, "bsc_id"):
                if ref not in per_subject or ref == name:
                    continue
                try:
                    t, p, df = paired_ttest(per_subject[name], per_subject[ref])
                except ValueError:
                    continue
                entry["ttests"][f"{name}_vs_{ref}"] = {"t": t, "p": p, "df": df}
        report["tasks"][task] = entry

    test_maps = {(s.id, t): s.contrasts[t] for s in test_subjects for t in tasks}
    retest_maps = {(s.id, t): s.retests[t] for s in test_subjects for t in s.retests}
    gavg_maps = {t: cohort.group_averages[t].field for t in tasks}
    try:
        predictable = predictable_filter(test_maps, retest_maps, gavg_maps, sids, tasks)
    except DataError:
        log.warning("retest data incomplete; predictable-task filter skipped")
        predictable = None
    report["predictable_tasks"] = predictable

    all_names = sorted({n for t in tasks for n in report["tasks"][t]["sources"]})
    for scope, task_list in (("all_tasks", tasks),
                             ("predictable_tasks", predictable or [])):
        means = {}
        for name in all_names:
            vals = [report["tasks"][t]["sources"][name]["mean_auc"]
                    for t in task_list if name in report["tasks"][t]["sources"]]
            if vals:
                means[name] = {"mean_auc": float(np.mean(vals)), "n_tasks": len(vals)}
        report[f"scenario_means_{scope}"] = means

    return EvalReport(report, id_matrices, mean_curves)
