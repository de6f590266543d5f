"""Experiment harness: dataset generation, training, prediction, evaluation.

Subcommands::

    opic synth    --out DIR [--config cfg.json] [--seed N]
    opic train    --data DIR --out DIR --model {opic,bsc} [--holdout-group G]
                  [--holdout-tasks a,b] [--epochs N] [--batch N] [--lr F]
                  [--loss {l2,rc}] [--seed N] [--hemispheres {1,2}] [--widths a,b,c]
    opic logo     --data DIR --out DIR [train flags] [--parallel N]
    opic predict  --data DIR --checkpoint DIR --out DIR [--zero-gavg] [--subjects SPLIT]
    opic eval     --data DIR --pred DIR --out DIR [--pred-bsc DIR] [--pred-seen DIR]
    opic report   --eval DIR [--out DIR]

Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric failure.
`OPIC_NUM_THREADS` caps fold-level parallelism for `logo --parallel`.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import dataset as ds
from .errors import DataError, NumericError
from .evaluate import build_report
from .models import (
    BscModel,
    ModelConfig,
    OpicModel,
    TrainConfig,
    average_indomain_predictions,
    bsc_forward,
    predict_cohort,
    train,
)
from .synthdata import SynthConfig, generate_cohort

log = logging.getLogger("opic")


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--batch", type=int, default=10)
    p.add_argument("--lr", type=float, default=3e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--loss", choices=("l2", "rc"), default="l2")
    p.add_argument("--widths", type=str, default=None,
                   help="comma-separated channel widths per U-Net level")
    p.add_argument("--hemispheres", type=int, choices=(1, 2), default=None,
                   help="must match the dataset; defaults to the dataset's value")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="opic", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset directory")
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None, help="JSON file overriding SynthConfig fields")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--hemispheres", type=int, choices=(1, 2), default=None)

    p = sub.add_parser("train", help="train one model")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--model", choices=("opic", "bsc"), default="opic")
    p.add_argument("--holdout-group", default=None)
    p.add_argument("--holdout-tasks", default=None, help="comma-separated task ids")
    _add_train_flags(p)

    p = sub.add_parser("logo", help="leave-one-group-out training, all folds")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--parallel", type=int, default=1,
                   help="fold worker processes (capped by OPIC_NUM_THREADS)")
    _add_train_flags(p)

    p = sub.add_parser("predict", help="predict test subjects with a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--subjects", default="test", choices=("test", "all"))
    p.add_argument("--zero-gavg", action="store_true",
                   help="conditioning ablation: feed an all-zero group-average map")

    p = sub.add_parser("eval", help="evaluate predictions against the dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--pred", required=True, help="logo predictions directory")
    p.add_argument("--pred-bsc", default=None)
    p.add_argument("--pred-seen", default=None,
                   help="predictions from a two-task-holdout run (seen-group scenario)")
    p.add_argument("--out", required=True)

    p = sub.add_parser("report", help="render figures and tables from an eval directory")
    p.add_argument("--eval", dest="eval_dir", required=True)
    p.add_argument("--out", default=None, help="defaults to the eval directory")
    return ap


def _model_config(args, cohort) -> ModelConfig:
    kw = {}
    if args.widths:
        widths = tuple(int(w) for w in args.widths.split(","))
        kw["widths"] = widths
        kw["levels"] = len(widths)
    if args.hemispheres is not None and args.hemispheres != cohort.hemispheres:
        raise DataError(
            f"--hemispheres {args.hemispheres} but dataset has {cohort.hemispheres}")
    return ModelConfig(hemispheres=cohort.hemispheres, components=cohort.components, **kw)


def _train_config(args, holdout_group=None, holdout_tasks=()) -> TrainConfig:
    return TrainConfig(
        epochs=args.epochs, batch_size=args.batch, lr=args.lr, seed=args.seed,
        holdout_group=holdout_group, holdout_tasks=tuple(holdout_tasks), loss=args.loss,
    )


def cmd_synth(args) -> int:
    overrides = {}
    if args.config:
        cfg_path = Path(args.config)
        if not cfg_path.exists():
            raise DataError(f"config file {cfg_path} does not exist")
        overrides = json.loads(cfg_path.read_text())
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.hemispheres is not None:
        overrides["hemispheres"] = args.hemispheres
    try:
        cfg = SynthConfig(**overrides)
    except TypeError as e:
        raise DataError(f"bad synth config: {e}") from e
    cohort = generate_cohort(cfg)
    out = ds.save_cohort(cohort, args.out)
    splits = {sp: len(cohort.subjects_in(sp)) for sp in ("train", "val", "test")}
    print(f"dataset written to {out}")
    print(f"  mesh level {cohort.level} ({cohort.n_vertices} vertices), "
          f"{cohort.hemispheres} hemisphere(s), {cohort.components} components")
    print(f"  subjects {splits}, {len(cohort.groups())} groups x "
          f"{len(cohort.tasks) // len(cohort.groups())} tasks, seed {cfg.seed}")
    return 0


def _write_train_outputs(out_dir: Path, result, model, extra: dict) -> None:
    meta = {
        "best_epoch": result.best_epoch,
        "train_tasks": result.train_tasks,
        "history": result.history,
        **extra,
    }
    ds.save_checkpoint(model, out_dir, meta)
    (out_dir / "train.log").write_text("\n".join(result.log_lines) + "\n")


def cmd_train(args) -> int:
    cohort = ds.load_cohort(args.data)
    holdout_tasks = tuple(t for t in (args.holdout_tasks or "").split(",") if t)
    if args.model == "bsc":
        if args.holdout_group:
            raise DataError("bsc trains on a fixed task list; --holdout-group applies to opic")
        tasks = [t for t in cohort.task_ids() if t not in holdout_tasks]
        model = BscModel(cohort.hierarchy, _model_config(args, cohort), tasks, seed=args.seed)
    else:
        model = OpicModel(cohort.hierarchy, _model_config(args, cohort), seed=args.seed)
    cfg = _train_config(args, args.holdout_group if args.model == "opic" else None, holdout_tasks)
    result = train(model, cohort, cfg)
    out = Path(args.out)
    _write_train_outputs(out, result, model, {
        "holdout_group": cfg.holdout_group,
        "holdout_tasks": list(cfg.holdout_tasks),
        "seed": cfg.seed, "epochs": cfg.epochs, "batch": cfg.batch_size, "lr": cfg.lr,
        "loss": cfg.loss,
    })
    print(f"checkpoint written to {out} (best epoch {result.best_epoch})")
    return 0


def _predictions_from_model(model, cohort, subjects, zero_gavg=False):
    if isinstance(model, OpicModel):
        return predict_cohort(model, cohort, subjects, cohort.task_ids(), zero_gavg=zero_gavg)
    preds = {}
    for s in subjects:
        block = bsc_forward(model, s.connectomes)
        for task in model.tasks:
            preds[(s.id, task)] = model.task_block(block, task)
    return preds


def _fold_worker(payload):
    data_dir, out_dir, group, args_dict = payload
    args = argparse.Namespace(**args_dict)
    cohort = ds.load_cohort(data_dir)
    model = OpicModel(cohort.hierarchy, _model_config(args, cohort),
                      seed=_fold_seed_int(args.seed, group, cohort))
    cfg = TrainConfig(epochs=args.epochs, batch_size=args.batch, lr=args.lr,
                      seed=_fold_seed_int(args.seed, group, cohort),
                      holdout_group=group, loss=args.loss)
    result = train(model, cohort, cfg)
    fold_dir = Path(out_dir) / f"fold_{group}"
    _write_train_outputs(fold_dir, result, model, {
        "holdout_group": group, "seed": cfg.seed,
        "epochs": cfg.epochs, "batch": cfg.batch_size, "lr": cfg.lr, "loss": cfg.loss,
    })
    preds = predict_cohort(model, cohort, cohort.subjects_in("test"), cohort.task_ids())
    return group, {k: v.data for k, v in preds.items()}


def _fold_seed_int(master: int, group: str, cohort) -> int:
    idx = cohort.groups().index(group)
    return int(np.random.SeedSequence(entropy=master, spawn_key=(100, idx)).generate_state(1)[0])


def _worker_init():
    os.environ["OPENBLAS_NUM_THREADS"] = "1"
    os.environ["OMP_NUM_THREADS"] = "1"


def cmd_logo(args) -> int:
    cohort = ds.load_cohort(args.data)
    groups = cohort.groups()
    if len(groups) < 2:
        raise DataError("leave-one-group-out needs at least two task groups")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    max_workers = int(os.environ.get("OPIC_NUM_THREADS", os.cpu_count() or 1))
    workers = max(1, min(args.parallel, max_workers, len(groups)))
    args_dict = {k: getattr(args, k) for k in
                 ("epochs", "batch", "lr", "seed", "loss", "widths", "hemispheres")}
    payloads = [(args.data, str(out), g, args_dict) for g in groups]

    fold_preds: dict[str, dict] = {}
    if workers > 1:
        import concurrent.futures as cf

        ctx = __import__("multiprocessing").get_context("spawn")
        with cf.ProcessPoolExecutor(max_workers=workers, mp_context=ctx,
                                    initializer=_worker_init) as pool:
            for group, preds in pool.map(_fold_worker, payloads):
                fold_preds[group] = preds
    else:
        for payload in payloads:
            group, preds = _fold_worker(payload)
            fold_preds[group] = preds

    test_ids = [s.id for s in cohort.subjects_in("test")]
    entries, arrays = [], {}
    for group in groups:
        for (sid, task), arr in fold_preds[group].items():
            in_domain = cohort.group_of(task) != group
            entries.append({"subject": sid, "task": task, "fold": group,
                            "in_domain": in_domain})
            arrays[(group, sid, task)] = arr
    for sid in test_ids:
        for task in cohort.task_ids():
            members = [fold_preds[g][(sid, task)] for g in groups
                       if cohort.group_of(task) != g]
            entries.append({"subject": sid, "task": task, "fold": "merged",
                            "in_domain": True})
            arrays[("merged", sid, task)] = np.mean(members, axis=0)
    ds.save_predictions(out / "predictions", "opic", "logo", entries, arrays)
    print(f"logo run complete: {len(groups)} folds, predictions in {out / 'predictions'}")
    return 0


def cmd_predict(args) -> int:
    cohort = ds.load_cohort(args.data)
    model, manifest = ds.load_checkpoint(args.checkpoint)
    subjects = cohort.subjects_in("test") if args.subjects == "test" else cohort.subjects
    preds = _predictions_from_model(model, cohort, subjects, zero_gavg=args.zero_gavg)
    train_tasks = set(manifest.get("train", {}).get("train_tasks", cohort.task_ids()))
    entries, arrays = [], {}
    fold = "zero_gavg" if args.zero_gavg else "single"
    for (sid, task), field in preds.items():
        entries.append({"subject": sid, "task": task, "fold": fold,
                        "in_domain": task in train_tasks})
        arrays[(fold, sid, task)] = field.data
    ds.save_predictions(args.out, model.kind, fold, entries, arrays)
    print(f"{len(entries)} predictions written to {args.out}")
    return 0


def _load_sources(args, cohort) -> dict[str, dict]:
    from .nncore import ChannelField

    def as_fields(entries):
        return {(e["subject"], e["task"]): ChannelField(cohort.level, e["data"])
                for e in entries}

    manifest, entries = ds.load_predictions(args.pred)
    sources: dict[str, dict] = {}
    merged = [e for e in entries if e["fold"] == "merged"]
    ood = [e for e in entries if e["fold"] != "merged" and not e["in_domain"]]
    if manifest["kind"] == "logo":
        sources["opic_id"] = as_fields(merged)
        sources["opic_ood"] = as_fields(ood)
    else:
        sources["opic_id"] = as_fields([e for e in entries if e["in_domain"]])
        if ood:
            sources["opic_ood"] = as_fields(ood)

    if args.pred_bsc:
        _, bsc_entries = ds.load_predictions(args.pred_bsc)
        sources["bsc_id"] = as_fields([e for e in bsc_entries if e["in_domain"]])
    if args.pred_seen:
        _, seen_entries = ds.load_predictions(args.pred_seen)
        sources["opic_ood_seen"] = as_fields([e for e in seen_entries if not e["in_domain"]])
    return {k: v for k, v in sources.items() if v}


def cmd_eval(args) -> int:
    cohort = ds.load_cohort(args.data)
    sources = _load_sources(args, cohort)
    test_ids = [s.id for s in cohort.subjects_in("test")]
    for name in ("opic_id", "opic_ood"):
        if name in sources:
            missing = [(sid, t) for sid in test_ids for t in cohort.task_ids()
                       if (sid, t) not in sources[name]]
            if missing:
                raise DataError(f"{name} predictions missing {len(missing)} "
                                f"(subject, task) pairs, e.g. {missing[0]}")
    report = build_report(cohort, sources)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json() + "\n")

    with open(out / "dice_curves.csv", "w") as f:
        f.write("task,source,threshold,dice\n")
        for (task, source) in sorted(report.mean_curves):
            ths, dice = report.mean_curves[(task, source)]
            for t, d in zip(ths, dice):
                f.write(f"{task},{source},{t:g},{d:.6f}\n")

    names = report.data["source_names"]
    with open(out / "summary.csv", "w") as f:
        f.write("task,group," + ",".join(names) + ",predictable\n")
        for task, entry in sorted(report.data["tasks"].items()):
            cells = []
            for name in names:
                src = entry["sources"].get(name)
                cells.append(f"{src['mean_auc']:.4f}" if src else "")
            predictable = (report.data["predictable_tasks"] is not None
                           and task in report.data["predictable_tasks"])
            f.write(f"{task},{entry['group']}," + ",".join(cells) + f",{int(predictable)}\n")

    from .otf import write_otf
    mat_dir = out / "id_matrices"
    mat_dir.mkdir(exist_ok=True)
    for (task, source), mat in sorted(report.id_matrices.items()):
        write_otf(mat_dir / f"{task}__{source}.otf", mat)

    print(f"evaluation written to {out}")
    for scope in ("all_tasks", "predictable_tasks"):
        means = report.data.get(f"scenario_means_{scope}", {})
        if means:
            pretty = ", ".join(f"{k}={v['mean_auc']:.4f}" for k, v in sorted(means.items()))
            print(f"  mean AUC over {scope}: {pretty}")
    return 0


def cmd_report(args) -> int:
    from .report import render_report

    out = Path(args.out) if args.out else Path(args.eval_dir)
    paths = render_report(args.eval_dir, out)
    for p in paths:
        print(f"wrote {p}")
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "logo": cmd_logo,
    "predict": cmd_predict,
    "eval": cmd_eval,
    "report": cmd_report,
}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except DataError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
