"""Dataset directories, checkpoints and prediction stores.

One manifest (JSON, sorted keys, no timestamps) plus OTF tensors; the same
layout serves generated cohorts and externally prepared data.  All writes go
through a temp-file-then-rename step so a crashed run never leaves a torn
file, and identical inputs produce byte-identical directories.

Seed lineage: a dataset records its master seed; every derived stream is a
`numpy.random.SeedSequence(master, spawn_key=...)` with the spawn keys listed
in the manifest, so any subject or fold can be regenerated in isolation.
"""

from __future__ import annotations

import dataclasses
import json
import os
from pathlib import Path

import numpy as np

from .connectome import Connectome, GroupAverageMap
from .errors import DataError
from .mesh import save_mesh_text
from .models import BscModel, ModelConfig, OpicModel, _MeshUNet
from .mesh import build_hierarchy
from .nncore import ChannelField
from .otf import read_otf, write_otf
from .synthdata import Cohort, Subject, SynthConfig, TaskInfo

MANIFEST = "manifest.json"
SEED_SCHEME = ("SeedSequence(master, spawn_key): (0,h)=fields, (1,i)=subject latent/features, "
               "(2,i)=subject timeseries, (3,i)=subject noise, (100,k)=fold k training")

__all__ = [
    "save_cohort", "load_cohort",
    "save_checkpoint", "load_checkpoint",
    "save_predictions", "load_predictions",
]


def _atomic_bytes(path: Path, payload: bytes) -> None:
    tmp = path.parent / (path.name + ".tmp")
    tmp.write_bytes(payload)
    os.replace(tmp, path)


def _atomic_json(path: Path, obj) -> None:
    _atomic_bytes(path, (json.dumps(obj, sort_keys=True, indent=1) + "\n").encode())


def _atomic_otf(path: Path, arr: np.ndarray) -> None:
    tmp = path.parent / (path.name + ".tmp")
    write_otf(tmp, arr)
    os.replace(tmp, path)


def save_cohort(cohort: Cohort, out_dir) -> Path:
    out = Path(out_dir)
    tensors = out / "tensors"
    for sub in ("connectome", "contrast", "retest", "gavg"):
        (tensors / sub).mkdir(parents=True, exist_ok=True)

    subjects_meta = []
    for s in cohort.subjects:
        conn_path = f"tensors/connectome/{s.id}.otf"
        _atomic_otf(out / conn_path, np.stack([c.data for c in s.connectomes]))
        contrasts, retests = {}, {}
        for task, field in sorted(s.contrasts.items()):
            p = f"tensors/contrast/{s.id}__{task}.otf"
            _atomic_otf(out / p, field.data)
            contrasts[task] = p
        for task, field in sorted(s.retests.items()):
            p = f"tensors/retest/{s.id}__{task}.otf"
            _atomic_otf(out / p, field.data)
            retests[task] = p
        entry = {"id": s.id, "split": s.split, "connectome": conn_path, "contrasts": contrasts}
        if retests:
            entry["retest"] = retests
        subjects_meta.append(entry)

    tasks_meta = []
    for t in cohort.tasks:
        p = f"tensors/gavg/{t.id}.otf"
        _atomic_otf(out / p, cohort.group_averages[t.id].field.data)
        tasks_meta.append({"id": t.id, "group": t.group, "gavg": p})

    _atomic_otf(out / "tensors/parcels.otf", cohort.parcels.astype(np.float64))
    save_mesh_text(cohort.hierarchy.finest, out / "mesh.txt")

    manifest = {
        "format": "opic-dataset-v1",
        "mesh": {"kind": "icosphere", "level": cohort.level, "path": "mesh.txt",
                 "vertices": cohort.n_vertices},
        "hemispheres": cohort.hemispheres,
        "components": cohort.components,
        "seed": cohort.seed,
        "seed_scheme": SEED_SCHEME,
        "subjects": subjects_meta,
        "tasks": tasks_meta,
        "parcels": "tensors/parcels.otf",
    }
    if cohort.config is not None:
        manifest["synth_config"] = dataclasses.asdict(cohort.config)
    _atomic_json(out / MANIFEST, manifest)
    return out


def load_cohort(data_dir) -> Cohort:
    root = Path(data_dir)
    mpath = root / MANIFEST
    if not mpath.exists():
        raise DataError(f"no {MANIFEST} in {root}")
    manifest = json.loads(mpath.read_text())
    if manifest.get("format") != "opic-dataset-v1":
        raise DataError(f"unrecognized dataset format {manifest.get('format')!r}")
    mesh_meta = manifest["mesh"]
    if mesh_meta.get("kind") != "icosphere":
        raise DataError("only icosphere-hierarchy datasets can be loaded into a cohort; "
                        "external meshes are supported at the mesh-exchange level only")
    level = int(mesh_meta["level"])
    hemis = int(manifest["hemispheres"])

    def tensor(rel: str) -> np.ndarray:
        p = root / rel
        if not p.exists():
            raise DataError(f"manifest references missing file {rel}")
        return read_otf(p)

    subjects = []
    for meta in manifest["subjects"]:
        if meta["split"] not in ("train", "val", "test"):
            raise DataError(f"bad split tag {meta['split']!r} for subject {meta['id']}")
        conn = tensor(meta["connectome"])
        if conn.ndim != 3 or conn.shape[0] != hemis:
            raise DataError(f"connectome for {meta['id']} must be (H, V, D), got {conn.shape}")
        contrasts = {t: ChannelField(level, tensor(p)) for t, p in meta["contrasts"].items()}
        retests = {t: ChannelField(level, tensor(p)) for t, p in meta.get("retest", {}).items()}
        if meta["split"] == "test" and not retests:
            raise DataError(f"test subject {meta['id']} has no retest maps")
        subjects.append(Subject(
            meta["id"], meta["split"], None,
            [Connectome(level, conn[h]) for h in range(hemis)],
            contrasts, retests,
        ))

    tasks = [TaskInfo(t["id"], t["group"]) for t in manifest["tasks"]]
    gavgs = {
        t["id"]: GroupAverageMap(t["id"], ChannelField(level, tensor(t["gavg"])))
        for t in manifest["tasks"]
    }
    parcels = tensor(manifest["parcels"]).astype(np.int64)
    cfg = SynthConfig(**manifest["synth_config"]) if "synth_config" in manifest else None
    return Cohort(level, hemis, int(manifest["components"]), subjects, tasks, gavgs,
                  parcels, config=cfg, seed=manifest.get("seed"))


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(model: _MeshUNet, out_dir, meta: dict | None = None) -> Path:
    out = Path(out_dir)
    (out / "params").mkdir(parents=True, exist_ok=True)
    params_meta = []
    for name in sorted(model.layers):
        cp = model.layers[name]
        for part, tensor_ in (("taps", cp.taps), ("bias", cp.bias)):
            rel = f"params/{name}.{part}.otf"
            _atomic_otf(out / rel, tensor_.data)
            params_meta.append({"name": f"{name}.{part}", "path": rel,
                                "shape": list(tensor_.data.shape)})
    for name in sorted(model.extra_params):
        rel = f"params/extra.{name}.otf"
        _atomic_otf(out / rel, model.extra_params[name].data)
        params_meta.append({"name": f"extra.{name}", "path": rel,
                            "shape": list(model.extra_params[name].data.shape)})
    manifest = {
        "format": "opic-checkpoint-v1",
        "kind": model.kind,
        "max_level": model.hierarchy.max_level,
        "model_config": dataclasses.asdict(model.config),
        "seed": model.seed,
        "params": params_meta,
    }
    if isinstance(model, BscModel):
        manifest["tasks"] = model.tasks
    if meta:
        manifest["train"] = meta
    _atomic_json(out / "checkpoint.json", manifest)
    return out


def load_checkpoint(ckpt_dir) -> tuple[_MeshUNet, dict]:
    root = Path(ckpt_dir)
    mpath = root / "checkpoint.json"
    if not mpath.exists():
        raise DataError(f"no checkpoint.json in {root}")
    manifest = json.loads(mpath.read_text())
    if manifest.get("format") != "opic-checkpoint-v1":
        raise DataError(f"unrecognized checkpoint format {manifest.get('format')!r}")
    raw_cfg = dict(manifest["model_config"])
    raw_cfg["widths"] = tuple(raw_cfg["widths"])
    config = ModelConfig(**raw_cfg)
    hierarchy = build_hierarchy(int(manifest["max_level"]))
    if manifest["kind"] == "opic":
        model: _MeshUNet = OpicModel(hierarchy, config, seed=manifest.get("seed", 0))
    elif manifest["kind"] == "bsc":
        model = BscModel(hierarchy, config, manifest["tasks"], seed=manifest.get("seed", 0))
    else:
        raise DataError(f"unknown model kind {manifest['kind']!r}")

    by_name = {}
    for pm in manifest["params"]:
        arr = read_otf(root / pm["path"])
        if list(arr.shape) != pm["shape"]:
            raise DataError(f"parameter {pm['name']} shape mismatch")
        by_name[pm["name"]] = arr
    for name in sorted(model.layers):
        cp = model.layers[name]
        cp.taps.data = by_name[f"{name}.taps"].astype(cp.taps.data.dtype, copy=False)
        cp.bias.data = by_name[f"{name}.bias"].astype(cp.bias.data.dtype, copy=False)
    for name in sorted(model.extra_params):
        t = model.extra_params[name]
        t.data = by_name[f"extra.{name}"].astype(t.data.dtype, copy=False)
    return model, manifest


# ---------------------------------------------------------------------------
# Prediction stores
# ---------------------------------------------------------------------------


def save_predictions(out_dir, model_kind: str, store_kind: str,
                     entries: list[dict], arrays: dict) -> Path:
    """entries: [{subject, task, fold, in_domain}]; arrays keyed the same way."""
    out = Path(out_dir)
    (out / "tensors").mkdir(parents=True, exist_ok=True)
    meta_entries = []
    for e in sorted(entries, key=lambda e: (str(e["fold"]), e["subject"], e["task"])):
        key = (e["fold"], e["subject"], e["task"])
        rel = f"tensors/{e['fold']}__{e['subject']}__{e['task']}.otf"
        _atomic_otf(out / rel, np.asarray(arrays[key], dtype=np.float64))
        meta_entries.append({**e, "path": rel})
    _atomic_json(out / "predictions.json", {
        "format": "opic-predictions-v1",
        "model": model_kind,
        "kind": store_kind,
        "entries": meta_entries,
    })
    return out


def load_predictions(pred_dir) -> tuple[dict, list[dict]]:
    root = Path(pred_dir)
    mpath = root / "predictions.json"
    if not mpath.exists():
        raise DataError(f"no predictions.json in {root}")
    manifest = json.loads(mpath.read_text())
    if manifest.get("format") != "opic-predictions-v1":
        raise DataError(f"unrecognized predictions format {manifest.get('format')!r}")
    entries = []
    for e in manifest["entries"]:
        arr = read_otf(root / e["path"])
        entries.append({**e, "data": arr})
    return manifest, entries
