"""Split cost-bearing layers between the FLOP and parameter regularizers."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, Iterable, Optional, Tuple

import numpy as np

from .costs import FLOP, PARAM, cost_report, relaxed_cost
from .errors import PartitionError
from .network import NetworkSpec, ParamStore

NONE = "NONE"
POLICIES = ("half_split", "all_flop", "all_param", "by_index")
_CLI_ALIASES = {"half": "half_split", "flop": "all_flop", "param": "all_param"}


@dataclass
class PartitionPlan:
    assignment: Dict[str, str]
    policy: str
    flop_stages: Tuple[int, ...] = ()

    def layers(self, which: str):
        return [k for k, v in self.assignment.items() if v == which]

    def to_dict(self) -> dict:
        return {"policy": self.policy, "assignment": dict(self.assignment), "flop_stages": list(self.flop_stages)}

    @classmethod
    def from_dict(cls, d) -> "PartitionPlan":
        return cls(dict(d["assignment"]), d["policy"], tuple(d.get("flop_stages", ())))

    def validate(self, spec: NetworkSpec) -> None:
        names = [l.name for l in spec.cost_layers()]
        if set(self.assignment) != set(names):
            missing = sorted(set(names) - set(self.assignment))
            extra = sorted(set(self.assignment) - set(names))
            raise PartitionError(f"plan does not cover the cost-bearing layers (missing {missing}, unknown {extra})")
        for name, v in self.assignment.items():
            if v not in (FLOP, PARAM, NONE):
                raise PartitionError(f"{name}: invalid assignment {v!r}")
            if v == NONE and name != spec.classifier.name:
                raise PartitionError(f"{name}: only the classifier may be left unregularized")


def parse_policy(text: str):
    """CLI form ``half|flop|param|idx:1,2`` -> (policy, flop stage indices or None)."""
    text = text.strip()
    if text in _CLI_ALIASES:
        return _CLI_ALIASES[text], None
    if text in POLICIES and text != "by_index":
        return text, None
    if text.startswith("idx:"):
        body = text[4:].strip()
        try:
            idx = [int(t) for t in body.split(",") if t.strip()] if body else []
        except ValueError:
            raise PartitionError(f"bad stage index list {body!r}") from None
        return "by_index", idx
    raise PartitionError(f"unknown partition {text!r}; use half, flop, param or idx:<list>")


def make_plan(spec: NetworkSpec, policy: str = "half_split", flop_stages: Optional[Iterable[int]] = None) -> PartitionPlan:
    """Assign every cost-bearing layer to FLOP, PARAM or (classifier only) NONE.

    ``half_split`` puts the first ceil(M/2) of M conv stages under the FLOP
    regularizer and the rest under PARAM, leaving the classifier out.
    ``all_flop`` / ``all_param`` regularize the entire network with one cost.
    ``by_index`` takes the 1-based stage numbers that go to FLOP; the other
    stages go to PARAM.
    """
    policy, parsed = parse_policy(policy) if policy not in POLICIES else (policy, None)
    if parsed is not None:
        flop_stages = parsed
    stages = spec.stages
    m = len(stages)
    clf = spec.classifier.name
    if policy == "half_split":
        flop = set(range(1, math.ceil(m / 2) + 1))
        clf_set = NONE
    elif policy == "all_flop":
        flop, clf_set = set(range(1, m + 1)), FLOP
    elif policy == "all_param":
        flop, clf_set = set(), PARAM
    elif policy == "by_index":
        if flop_stages is None:
            raise PartitionError("by_index policy needs a stage list")
        listed = list(flop_stages)
        if len(set(listed)) != len(listed):
            raise PartitionError(f"stage list {listed} has duplicates")
        bad = [i for i in listed if not 1 <= i <= m]
        if bad:
            raise PartitionError(f"stage indices {bad} out of range 1..{m}")
        flop, clf_set = set(listed), NONE
    else:
        raise PartitionError(f"unknown policy {policy!r}")
    assignment = {st.conv: FLOP if st.index + 1 in flop else PARAM for st in stages}
    assignment[clf] = clf_set
    plan = PartitionPlan(assignment, policy, tuple(sorted(flop)))
    plan.validate(spec)
    return plan


def set_costs(plan: PartitionPlan, spec: NetworkSpec) -> Tuple[int, int]:
    """Full-width exact FLOP cost of the FLOP set and PARAM cost of the PARAM set."""
    rows = {r.layer: r for r in cost_report(spec).per_layer}
    return (sum(rows[n].flop for n in plan.layers(FLOP)),
            sum(rows[n].param for n in plan.layers(PARAM)))


def partition_penalty(plan: PartitionPlan, spec: NetworkSpec, store: ParamStore, alpha: float,
                      threshold: float = 0.01, flop_scale: float = 1.0,
                      param_scale: float = 1.0) -> Tuple[float, Dict[str, np.ndarray]]:
    """alpha * (relaxed FLOP cost over FLOP layers + relaxed PARAM cost over PARAM layers).

    ``flop_scale`` / ``param_scale`` multiply each cost before summing; the
    trainer uses them to normalize each set by its own full-width cost.
    """
    if alpha < 0:
        raise ValueError(f"alpha must be >= 0, got {alpha}")
    plan.validate(spec)
    grads = {st.bn: np.zeros(st.channels) for st in spec.stages}
    total = 0.0
    for which, s in ((FLOP, flop_scale), (PARAM, param_scale)):
        layers = plan.layers(which)
        if not layers:
            continue
        value, g = relaxed_cost(spec, store, which, threshold, layers)
        total += alpha * s * value
        for k, v in g.items():
            grads[k] += alpha * s * v
    return total, grads
