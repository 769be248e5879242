"""Run orchestration: teacher training, compression, sweeps and manifests."""

from __future__ import annotations

import csv
import datetime as _dt
import io
import itertools
import logging
import traceback
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import __version__
from . import config as cfgmod
from ._io import atomic_write_json, atomic_write_text
from .data import Dataset, load_idx, synth_generate
from .errors import CompatibilityError, ConfigError, DataError, ShrinkforgeError
from .network import NetworkSpec, accuracy, load_checkpoint, resolve_spec
from .pruner import probe_deviation, prune, reestimate_bn, save_pruned, stage_drop_csv, stage_drop_report
from .trainer import TrainConfig, train

logger = logging.getLogger(__name__)

MANIFEST = "manifest.json"
RESULT = "result.json"


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def load_data(data_cfg: dict) -> Tuple[Dataset, Dataset]:
    kind = data_cfg["kind"]
    if kind == "synthetic":
        d = data_cfg
        return synth_generate(d["num_classes"], d["n_per_class"], tuple(d["size"]), d["difficulty"], d["seed"],
                              d.get("test_per_class"))
    for key in ("train_images", "train_labels", "test_images", "test_labels"):
        if not Path(data_cfg[key]).is_file():
            raise ConfigError(f"data.{key}: file {data_cfg[key]} does not exist")
    k = data_cfg.get("num_classes")
    train_set = load_idx(data_cfg["train_images"], data_cfg["train_labels"], k, "train")
    test_set = load_idx(data_cfg["test_images"], data_cfg["test_labels"], k or train_set.num_classes, "test")
    if k is None and test_set.num_classes != train_set.num_classes:
        test_set.num_classes = train_set.num_classes
    want = data_cfg.get("checksums")
    if want:
        got = {"train_images": train_set.provenance["checksums"]["images"],
               "train_labels": train_set.provenance["checksums"]["labels"],
               "test_images": test_set.provenance["checksums"]["images"],
               "test_labels": test_set.provenance["checksums"]["labels"]}
        for key, digest in want.items():
            if got.get(key) != digest:
                raise DataError(f"data.{key}: checksum differs from the recorded run")
    return train_set, test_set


def _pin_data(data_cfg: dict, train_set: Dataset, test_set: Dataset) -> dict:
    """Absolute paths, class count and checksums so a manifest pins the exact files."""
    if data_cfg["kind"] != "idx":
        return data_cfg
    out = dict(data_cfg)
    for key in ("train_images", "train_labels", "test_images", "test_labels"):
        out[key] = str(Path(out[key]).resolve())
    out["num_classes"] = train_set.num_classes
    out["checksums"] = {"train_images": train_set.provenance["checksums"]["images"],
                        "train_labels": train_set.provenance["checksums"]["labels"],
                        "test_images": test_set.provenance["checksums"]["images"],
                        "test_labels": test_set.provenance["checksums"]["labels"]}
    return out


def _spec_for(doc: dict, train_set: Dataset) -> NetworkSpec:
    return resolve_spec(doc["spec"], train_set.image_shape, train_set.num_classes)


def _write_manifest(out: Path, command: str, doc: dict, started: str, artifacts: Sequence[str]) -> None:
    atomic_write_json(out / MANIFEST, {
        "tool": "shrinkforge",
        "version": __version__,
        "command": command,
        "config": doc,
        "started": started,
        "finished": _now(),
        "artifacts": sorted(artifacts),
    })


def run_teacher(doc: dict, out_dir) -> dict:
    """Train a teacher from scratch; returns the result record."""
    started = _now()
    doc = cfgmod.resolve(doc, "teacher")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train_set, test_set = load_data(doc["data"])
    doc["data"] = _pin_data(doc["data"], train_set, test_set)
    spec = _spec_for(doc, train_set)
    doc["spec"] = spec.to_dict()
    cfg = TrainConfig.from_dict(doc["train"])
    store, metrics = train(spec, train_set, test_set, cfg, out_dir=out)
    result = {"command": "train-teacher", "accuracy": accuracy(store, spec, test_set.images, test_set.labels),
              "iterations": cfg.iterations, "seed": cfg.seed}
    atomic_write_json(out / RESULT, result)
    _write_manifest(out, "train-teacher", doc, started, ["checkpoint", "metrics.csv", "summary.json", RESULT])
    return result


def _probe(train_set: Dataset, test_set: Dataset, n: int) -> np.ndarray:
    images = np.concatenate([test_set.images, train_set.images])
    return images[:n]


def run_compress(doc: dict, out_dir) -> dict:
    """Distill a cost-regularized student from the teacher, then prune it.

    Writes the unpruned student under ``checkpoint/``, the compact network
    under ``pruned/`` and a ``result.json`` holding both accuracy columns.
    """
    started = _now()
    doc = cfgmod.resolve(doc, "student")
    if not doc.get("teacher"):
        raise ConfigError("teacher: compress needs a teacher checkpoint")
    teacher_path = Path(doc["teacher"])
    if not teacher_path.exists():
        raise ConfigError(f"teacher: checkpoint {teacher_path} does not exist")
    doc["teacher"] = str(teacher_path.resolve())
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    t_store, t_spec = load_checkpoint(teacher_path)
    train_set, test_set = load_data(doc["data"])
    doc["data"] = _pin_data(doc["data"], train_set, test_set)
    if t_spec.num_classes != train_set.num_classes:
        raise CompatibilityError(f"teacher predicts {t_spec.num_classes} classes, data has {train_set.num_classes}")
    if t_spec.input_shape != train_set.image_shape:
        raise CompatibilityError(f"teacher input {t_spec.input_shape} != data images {train_set.image_shape}")
    spec = _spec_for(doc, train_set)
    if spec.to_dict() != t_spec.to_dict():
        raise CompatibilityError("student spec differs from the teacher architecture")
    doc["spec"] = spec.to_dict()
    cfg = TrainConfig.from_dict(doc["train"])

    store, metrics = train(spec, train_set, test_set, cfg, teacher=(t_store, t_spec), out_dir=out)
    teacher_acc = accuracy(t_store, t_spec, test_set.images, test_set.labels)
    acc_unpruned = accuracy(store, spec, test_set.images, test_set.labels)

    structure = prune(store, spec, cfg.gamma_threshold, reference=t_spec)
    probe = _probe(train_set, test_set, doc["prune"]["probe_size"])
    dev = probe_deviation(store, spec, structure.compact_store, structure.compact_spec, probe)
    compact = structure.compact_store
    if doc["prune"]["bn_batches"] > 0:
        compact = reestimate_bn(compact, structure.compact_spec, train_set, doc["prune"]["bn_batches"],
                                cfg.batch_size, cfg.seed)
        structure.compact_store = compact
    acc_pruned = accuracy(compact, structure.compact_spec, test_set.images, test_set.labels)

    result = {
        "command": "compress",
        "alpha": cfg.alpha, "seed": cfg.seed, "partition": cfg.partition,
        "teacher_accuracy": teacher_acc,
        "acc_unpruned": acc_unpruned,
        "acc_pruned": acc_pruned,
        "red_flop": structure.red_flop,
        "red_param": structure.red_param,
        "alive_channels": [int(m.sum()) for m in structure.alive_masks],
        **{k: v for k, v in structure.report(dev).items() if k in ("flop", "param", "probe_deviation")},
    }
    save_pruned(structure, out / "pruned", dev,
                {"acc_unpruned": acc_unpruned, "acc_pruned": acc_pruned, "bn_reestimated": doc["prune"]["bn_batches"] > 0})
    atomic_write_text(out / "stage_drop.csv", stage_drop_csv(stage_drop_report(structure)))
    atomic_write_json(out / RESULT, result)
    _write_manifest(out, "compress", doc, started,
                    ["checkpoint", "metrics.csv", "summary.json", "pruned", "stage_drop.csv", RESULT])
    return result


def replay(manifest_path, out_dir) -> dict:
    manifest = cfgmod.load_manifest(manifest_path)
    runner = {"train-teacher": run_teacher, "compress": run_compress}.get(manifest["command"])
    if runner is None:
        raise ConfigError(f"command: cannot replay {manifest['command']!r}")
    return runner(manifest["config"], out_dir)


# ---------------------------------------------------------------------------
# sweeps

AGGREGATE_COLUMNS = ("partition", "alpha", "runs", "failed",
                     "acc_unpruned_mean", "acc_unpruned_std", "acc_pruned_mean", "acc_pruned_std",
                     "red_flop_mean", "red_flop_std", "red_param_mean", "red_param_std")
RUN_COLUMNS = ("partition", "alpha", "seed", "status", "acc_unpruned", "acc_pruned", "red_flop", "red_param",
               "flop", "param", "error", "dir")


def _child(args) -> dict:
    doc, out = args
    t = doc["train"]
    row = {"partition": t["partition"], "alpha": t["alpha"], "seed": t["seed"], "dir": str(out)}
    try:
        res = run_compress(doc, out)
        row.update(status="ok", error="", **{k: res[k] for k in
                                             ("acc_unpruned", "acc_pruned", "red_flop", "red_param", "flop", "param")})
    except ShrinkforgeError as exc:
        row.update(status="failed", error=f"{type(exc).__name__}: {exc}")
    except Exception as exc:  # a crashed child must not stop the sweep
        logger.debug("child crash\n%s", traceback.format_exc())
        row.update(status="failed", error=f"{type(exc).__name__}: {exc}")
    return row


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def _csv(columns, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r.get(c, "")) for c in columns])
    return buf.getvalue()


def aggregate(rows: List[dict]) -> List[dict]:
    """Mean and population std (ddof=0) of ACC and RED per (partition, alpha)."""
    out = []
    keys = []
    for r in rows:
        k = (r["partition"], r["alpha"])
        if k not in keys:
            keys.append(k)
    for part, alpha in keys:
        group = [r for r in rows if r["partition"] == part and r["alpha"] == alpha]
        ok = [r for r in group if r["status"] == "ok"]
        rec = {"partition": part, "alpha": alpha, "runs": len(group), "failed": len(group) - len(ok)}
        for col in ("acc_unpruned", "acc_pruned", "red_flop", "red_param"):
            vals = np.array([r[col] for r in ok], dtype=np.float64)
            rec[f"{col}_mean"] = float(vals.mean()) if len(vals) else float("nan")
            rec[f"{col}_std"] = float(vals.std(ddof=0)) if len(vals) else float("nan")
        out.append(rec)
    return out


def run_sweep(doc: dict, alphas: Sequence[float], seeds: Sequence[int], out_dir,
              partitions: Optional[Sequence[str]] = None, parallel: int = 1) -> Tuple[List[dict], List[dict]]:
    """One compression run per (partition, alpha, seed); failures are recorded, not raised."""
    if not alphas or not seeds:
        raise ConfigError("sweep needs at least one alpha and one seed")
    if parallel < 1:
        raise ConfigError(f"parallel: must be >= 1, got {parallel}")
    started = _now()
    base = cfgmod.resolve(doc, "student")
    partitions = list(partitions or [base["train"]["partition"]])
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    jobs = []
    for part, alpha, seed in itertools.product(partitions, alphas, seeds):
        child = cfgmod.merge(base, {"train": {"partition": part, "alpha": float(alpha), "seed": int(seed)}})
        jobs.append((child, out / f"{part.replace(':', '_').replace(',', '-')}" / f"alpha_{float(alpha):g}" / f"seed_{seed}"))
    if parallel == 1:
        rows = [_child(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            rows = list(pool.map(_child, jobs))
    agg = aggregate(rows)
    atomic_write_text(out / "runs.csv", _csv(RUN_COLUMNS, rows))
    atomic_write_text(out / "aggregate.csv", _csv(AGGREGATE_COLUMNS, agg))
    sweep_doc = dict(base, sweep={"alphas": [float(a) for a in alphas], "seeds": [int(s) for s in seeds],
                                  "partitions": partitions, "parallel": parallel})
    atomic_write_json(out / MANIFEST, {
        "tool": "shrinkforge", "version": __version__, "command": "sweep", "config": sweep_doc,
        "started": started, "finished": _now(), "artifacts": ["aggregate.csv", "runs.csv"],
    })
    return rows, agg


def read_csv_rows(path) -> List[Dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))

