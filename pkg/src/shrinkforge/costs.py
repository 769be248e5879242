"""FLOP / parameter cost model and its differentiable relaxation.

Exact costs follow the per-layer product forms

    flop_k  = C_in^k * (w^k)^2 * C_out^k * S_out^k
    param_k = C_in^k * (w^k)^2 * C_out^k

summed over the cost-bearing layers (convs and the dense classifier, which
counts as w = 1, S_out = 1). Channel counts are the *alive* counts.

The relaxed cost replaces each count with a bilinear surrogate in the bn
scales on either side of the layer. With u the input-side scales and v the
output-side scales, and alive counts A_in, A_out frozen for the step::

    relaxed_k = unit_k * (A_in * sum|v| + sum|u| * A_out) / 2

which equals the exact cost when every scale is alive with magnitude 1.
"""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from decimal import ROUND_HALF_UP, Decimal
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .network import CostLayer, NetworkSpec, ParamStore

FLOP = "FLOP"
PARAM = "PARAM"
CSV_COLUMNS = ("layer", "flop", "param", "relaxed_flop", "relaxed_param", "alive_in", "alive_out")


@dataclass
class LayerCost:
    layer: str
    flop: int
    param: int
    relaxed_flop: float
    relaxed_param: float
    alive_in: int
    alive_out: int


@dataclass
class CostReport:
    per_layer: List[LayerCost]
    metadata: Dict[str, object] = field(default_factory=dict)

    @property
    def total_flop(self) -> int:
        return sum(l.flop for l in self.per_layer)

    @property
    def total_param(self) -> int:
        return sum(l.param for l in self.per_layer)

    @property
    def total_relaxed_flop(self) -> float:
        return float(sum(l.relaxed_flop for l in self.per_layer))

    @property
    def total_relaxed_param(self) -> float:
        return float(sum(l.relaxed_param for l in self.per_layer))

    def totals(self) -> dict:
        return {
            "flop": self.total_flop,
            "param": self.total_param,
            "relaxed_flop": self.total_relaxed_flop,
            "relaxed_param": self.total_relaxed_param,
        }

    def to_dict(self) -> dict:
        return {"per_layer": [asdict(l) for l in self.per_layer], "totals": self.totals(), "metadata": self.metadata}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for l in self.per_layer:
            w.writerow([l.layer, l.flop, l.param, repr(l.relaxed_flop), repr(l.relaxed_param), l.alive_in, l.alive_out])
        t = self.totals()
        w.writerow(["total", t["flop"], t["param"], repr(t["relaxed_flop"]), repr(t["relaxed_param"]), "", ""])
        return buf.getvalue()


def full_masks(spec: NetworkSpec) -> List[np.ndarray]:
    return [np.ones(st.channels, dtype=bool) for st in spec.stages]


def _check_masks(spec: NetworkSpec, alive) -> List[np.ndarray]:
    if alive is None:
        return full_masks(spec)
    stages = spec.stages
    if len(alive) != len(stages):
        raise ValueError(f"expected {len(stages)} stage masks, got {len(alive)}")
    out = []
    for st, m in zip(stages, alive):
        m = np.asarray(m, dtype=bool)
        if m.shape != (st.channels,):
            raise ValueError(f"stage {st.conv}: mask length {m.size} != {st.channels} channels")
        out.append(m)
    return out


def _alive_counts(layer: CostLayer, masks: Sequence[np.ndarray]) -> Tuple[int, int]:
    a_in = layer.c_in if layer.in_stage is None else int(masks[layer.in_stage].sum()) * layer.in_multiplicity
    a_out = layer.c_out if layer.out_stage is None else int(masks[layer.out_stage].sum())
    return a_in, a_out


def _unit(layer: CostLayer, which: str) -> int:
    if which == FLOP:
        return layer.w * layer.w * layer.s_out
    if which == PARAM:
        return layer.w * layer.w
    raise ValueError(f"cost kind must be {FLOP!r} or {PARAM!r}, got {which!r}")


def exact_flop_cost(spec: NetworkSpec, alive=None) -> int:
    masks = _check_masks(spec, alive)
    return sum(a * b * _unit(l, FLOP) for l in spec.cost_layers() for a, b in [_alive_counts(l, masks)])


def exact_param_cost(spec: NetworkSpec, alive=None) -> int:
    masks = _check_masks(spec, alive)
    return sum(a * b * _unit(l, PARAM) for l in spec.cost_layers() for a, b in [_alive_counts(l, masks)])


def exact_cost(spec: NetworkSpec, which: str, alive=None) -> int:
    return exact_flop_cost(spec, alive) if which == FLOP else exact_param_cost(spec, alive)


def alive_from_store(spec: NetworkSpec, store: ParamStore, threshold: float) -> List[np.ndarray]:
    return [np.abs(store.gamma(st.bn)) > threshold for st in spec.stages]


def _relaxed_terms(spec: NetworkSpec, store: ParamStore, which: str, threshold: float,
                   layers: Optional[Iterable[str]] = None):
    """Yield (layer, value, {bn_name: gradient}) per selected cost layer."""
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    stages = spec.stages
    for st in stages:
        if f"{st.bn}.gamma" not in store.tensors:
            raise ValueError(f"conv {st.conv} has no bn scale vector in the store")
    selected = None if layers is None else set(layers)
    for layer in spec.cost_layers():
        if selected is not None and layer.name not in selected:
            continue
        unit = _unit(layer, which)
        m = layer.in_multiplicity
        grads = {}
        if layer.in_stage is None:
            sum_u, a_in = float(layer.c_in), layer.c_in
        else:
            u = store.gamma(stages[layer.in_stage].bn)
            sum_u = m * float(np.abs(u).sum())
            a_in = m * int((np.abs(u) > threshold).sum())
        if layer.out_stage is None:
            sum_v, a_out = float(layer.c_out), layer.c_out
        else:
            v = store.gamma(stages[layer.out_stage].bn)
            sum_v = float(np.abs(v).sum())
            a_out = int((np.abs(v) > threshold).sum())
        value = unit * (a_in * sum_v + sum_u * a_out) / 2.0
        if layer.in_stage is not None:
            grads[stages[layer.in_stage].bn] = unit * m * a_out / 2.0 * np.sign(u)
        if layer.out_stage is not None:
            bn = stages[layer.out_stage].bn
            g = unit * a_in / 2.0 * np.sign(v)
            grads[bn] = grads[bn] + g if bn in grads else g
        yield layer, value, grads


def relaxed_cost(spec: NetworkSpec, store: ParamStore, which: str, threshold: float = 0.01,
                 layers: Optional[Iterable[str]] = None) -> Tuple[float, Dict[str, np.ndarray]]:
    """Relaxed cost and its gradient w.r.t. every bn scale vector.

    ``layers`` restricts the sum to a subset of cost-bearing layer names.
    The returned dict has an entry (possibly all zeros) for every stage bn.
    """
    total = 0.0
    grads = {st.bn: np.zeros(st.channels) for st in spec.stages}
    for _, value, g in _relaxed_terms(spec, store, which, threshold, layers):
        total += value
        for k, v in g.items():
            grads[k] += v
    return total, grads


def cost_report(spec: NetworkSpec, store: Optional[ParamStore] = None, threshold: float = 0.01,
                alive=None) -> CostReport:
    """Per-layer exact and relaxed costs.

    Alive masks come from ``alive`` if given, else from the store's bn scales
    at ``threshold``, else everything is alive. Without a store the relaxed
    columns equal the exact ones (unit scales).
    """
    if alive is None and store is not None:
        alive = alive_from_store(spec, store, threshold)
    masks = _check_masks(spec, alive)
    relaxed = {FLOP: {}, PARAM: {}}
    if store is not None:
        for which in (FLOP, PARAM):
            for layer, value, _ in _relaxed_terms(spec, store, which, threshold):
                relaxed[which][layer.name] = value
    rows = []
    for layer in spec.cost_layers():
        a_in, a_out = _alive_counts(layer, masks)
        flop = a_in * a_out * _unit(layer, FLOP)
        param = a_in * a_out * _unit(layer, PARAM)
        rows.append(LayerCost(
            layer.name, flop, param,
            float(relaxed[FLOP].get(layer.name, flop)), float(relaxed[PARAM].get(layer.name, param)),
            a_in, a_out,
        ))
    bn_params = sum(2 * int(m.sum()) for m in masks)
    bias_params = spec.num_classes
    return CostReport(rows, {"threshold": threshold, "bn_params": bn_params, "bias_params": bias_params})


def red_metric(cost_student, cost_teacher) -> float:
    """Percentage reduction w.r.t. the teacher cost, rounded half-up to 0.1."""
    if cost_teacher == 0:
        raise ValueError("teacher cost must be positive")
    if cost_teacher < 0 or cost_student < 0:
        raise ValueError("costs must be non-negative")
    frac = 100 * (1 - Fraction(cost_student) / Fraction(cost_teacher))
    dec = Decimal(frac.numerator) / Decimal(frac.denominator)
    return float(dec.quantize(Decimal("0.1"), rounding=ROUND_HALF_UP))
