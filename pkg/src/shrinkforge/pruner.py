"""Dead-channel detection and extraction of the compact network."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import autodiff as ad
from ._io import atomic_write_json
from .costs import exact_flop_cost, exact_param_cost, red_metric
from .data import Dataset, batch_indices
from .errors import PruneError
from .network import NetworkSpec, ParamStore, forward, predict, save_checkpoint


@dataclass
class PrunedStructure:
    alive_masks: List[np.ndarray]
    compact_spec: NetworkSpec
    compact_store: ParamStore
    red_flop: float
    red_param: float
    per_stage_drop: List[float]
    stage_names: List[str] = field(default_factory=list)
    threshold: Optional[float] = None

    def report(self, probe_deviation: Optional[float] = None) -> dict:
        return {
            "red_flop": self.red_flop,
            "red_param": self.red_param,
            "per_stage_drop": self.per_stage_drop,
            "stages": self.stage_names,
            "alive_channels": [int(m.sum()) for m in self.alive_masks],
            "total_channels": [int(m.size) for m in self.alive_masks],
            "threshold": self.threshold,
            "probe_deviation": probe_deviation,
            "flop": exact_flop_cost(self.compact_spec),
            "param": exact_param_cost(self.compact_spec),
        }


def mark_dead(store: ParamStore, spec: NetworkSpec, threshold: float = 0.01) -> List[np.ndarray]:
    """Alive mask per conv stage: a channel lives iff ``|gamma| > threshold``."""
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    return [np.abs(store.gamma(st.bn)) > threshold for st in spec.stages]


def _apply_between(x: np.ndarray, layers) -> np.ndarray:
    t = ad.Tensor(x)
    for l in layers:
        if l.kind == "relu":
            t = ad.relu(t)
        elif l.kind == "avgpool":
            t = ad.avgpool2d(t, 2)
        elif l.kind == "flatten":
            t = ad.flatten(t)
        else:
            raise PruneError(f"cannot propagate a constant channel through layer kind {l.kind!r}")
    return t.data


def extract(store: ParamStore, spec: NetworkSpec, masks, threshold: Optional[float] = None,
            reference: Optional[NetworkSpec] = None) -> PrunedStructure:
    """Slice dead channels out of every stage.

    A dead channel's bn output is treated as the constant ``beta`` (exact when
    ``gamma == 0``). Before deletion that constant is pushed through the
    layers up to the next conv/dense, and its contribution is folded into the
    consumer: a per-position ``offset`` map for a conv (zero padding makes it
    position dependent) or the bias of the dense classifier.

    RED is measured against ``reference`` with every channel alive
    (default: ``spec`` itself).
    """
    stages = spec.stages
    masks = [np.asarray(m, dtype=bool) for m in masks]
    if len(masks) != len(stages):
        raise ValueError(f"expected {len(stages)} masks, got {len(masks)}")
    for st, m in zip(stages, masks):
        if m.shape != (st.channels,):
            raise ValueError(f"stage {st.conv}: mask length {m.size} != {st.channels}")
        if not m.any():
            raise PruneError(
                f"stage {st.conv} has no alive channels at this threshold; "
                f"lower alpha or the gamma threshold")

    t = {k: v.copy() for k, v in store.tensors.items()}

    # fold constant outputs of dead channels into their consumers
    for st, m in zip(stages, masks):
        dead = ~m
        if not dead.any():
            continue
        c, h, w = st.out_shape
        const = np.zeros((1, c, h, w))
        const[0, dead] = store.tensors[f"{st.bn}.beta"][dead][:, None, None]
        between, consumer = spec.downstream_of(st)
        const = _apply_between(const, between)
        if consumer.kind == "conv":
            k = store.tensors[f"{consumer.name}.kernel"]
            contrib = ad.conv2d(ad.Tensor(const), ad.Tensor(k), consumer.stride, consumer.padding).data[0]
            key = f"{consumer.name}.offset"
            t[key] = t[key] + contrib if key in t else contrib
        else:
            wmat = store.tensors[f"{consumer.name}.weight"]
            t[f"{consumer.name}.bias"] = t[f"{consumer.name}.bias"] + (const.reshape(1, -1) @ wmat.T)[0]

    # slice
    for st, m in zip(stages, masks):
        prev = masks[st.prev] if st.prev is not None else np.ones(st.in_shape[0], dtype=bool)
        t[f"{st.conv}.kernel"] = t[f"{st.conv}.kernel"][m][:, prev]
        if f"{st.conv}.offset" in t:
            t[f"{st.conv}.offset"] = t[f"{st.conv}.offset"][m]
        for suffix in ("gamma", "beta", "running_mean", "running_var"):
            t[f"{st.bn}.{suffix}"] = t[f"{st.bn}.{suffix}"][m]
    clf = spec.classifier.name
    if stages:
        last = stages[-1]
        mult = spec.layer_shapes()[-1][0][0] // last.channels
        t[f"{clf}.weight"] = t[f"{clf}.weight"][:, np.repeat(masks[-1], mult)]

    compact_spec = spec.with_channels([int(m.sum()) for m in masks])
    # keep the tensor order of a freshly built store, offsets right after their kernel
    order = []
    for name in store.tensors:
        order.append(name)
        if name.endswith(".kernel") and f"{name[:-7]}.offset" in t and f"{name[:-7]}.offset" not in store.tensors:
            order.append(f"{name[:-7]}.offset")
    compact = ParamStore({k: np.ascontiguousarray(t[k]) for k in order}, store.seed, store.step)

    ref = reference or spec
    return PrunedStructure(
        alive_masks=masks,
        compact_spec=compact_spec,
        compact_store=compact,
        red_flop=red_metric(exact_flop_cost(compact_spec), exact_flop_cost(ref)),
        red_param=red_metric(exact_param_cost(compact_spec), exact_param_cost(ref)),
        per_stage_drop=[float(100.0 * (~m).sum() / m.size) for m in masks],
        stage_names=[st.conv for st in stages],
        threshold=threshold,
    )


def prune(store: ParamStore, spec: NetworkSpec, threshold: float = 0.01,
          reference: Optional[NetworkSpec] = None) -> PrunedStructure:
    return extract(store, spec, mark_dead(store, spec, threshold), threshold, reference)


def stage_drop_report(structure: PrunedStructure) -> List[dict]:
    rows = []
    for name, m in zip(structure.stage_names, structure.alive_masks):
        dead = int((~m).sum())
        rows.append({"stage": name, "total": int(m.size), "dead": dead, "drop_pct": 100.0 * dead / m.size})
    total = sum(r["total"] for r in rows)
    dead = sum(r["dead"] for r in rows)
    rows.append({"stage": "total", "total": total, "dead": dead, "drop_pct": 100.0 * dead / total if total else 0.0})
    return rows


def stage_drop_csv(rows: List[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=["stage", "total", "dead", "drop_pct"], lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()


def probe_deviation(a_store: ParamStore, a_spec: NetworkSpec, b_store: ParamStore, b_spec: NetworkSpec,
                    probe: np.ndarray) -> float:
    """Largest absolute eval-mode logit difference between two networks."""
    return float(np.max(np.abs(predict(a_store, a_spec, probe) - predict(b_store, b_spec, probe))))


def reestimate_bn(store: ParamStore, spec: NetworkSpec, data: Dataset, n_batches: int = 50,
                  batch_size: int = 100, seed: int = 0) -> ParamStore:
    """Replace bn running statistics by averages of train-mode batch statistics."""
    out = store.clone()
    bns = [st.bn for st in spec.stages]
    acc_m = {b: np.zeros_like(out.tensors[f"{b}.running_mean"]) for b in bns}
    acc_v = {b: np.zeros_like(out.tensors[f"{b}.running_var"]) for b in bns}
    stream = batch_indices(len(data), min(batch_size, len(data)), np.random.default_rng(seed))
    for _ in range(n_batches):
        tmp = out.clone()
        forward(tmp, spec, data.images[next(stream)], "train", bn_momentum=0.0)
        for b in bns:
            acc_m[b] += tmp.tensors[f"{b}.running_mean"]
            acc_v[b] += tmp.tensors[f"{b}.running_var"]
    for b in bns:
        out.tensors[f"{b}.running_mean"] = acc_m[b] / n_batches
        out.tensors[f"{b}.running_var"] = acc_v[b] / n_batches
    return out


def save_pruned(structure: PrunedStructure, path, probe_dev: Optional[float] = None, extra: Optional[dict] = None) -> Path:
    path = Path(path)
    save_checkpoint(structure.compact_store, structure.compact_spec, path)
    atomic_write_json(path / "prune_report.json", {**structure.report(probe_dev), **(extra or {})})
    return path
