"""Adam training of teachers and cost-regularized distilled students."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import autodiff as ad
from ._io import atomic_write_json, atomic_write_text
from .costs import cost_report
from .data import Dataset, batch_indices
from .distill import DistillConfig, distill_loss, soften
from .errors import CompatibilityError, ConfigError, NumericalError
from .network import NetworkSpec, ParamStore, accuracy, build, forward, save_checkpoint
from .partition import make_plan, partition_penalty, set_costs

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    alpha: float = 0.0
    lam: float = 0.5
    temperature: float = 10.0
    gamma_threshold: float = 0.01
    iterations: int = 4000
    batch_size: int = 100
    lr: float = 1e-4
    seed: int = 0
    partition: str = "half"
    mode: str = "student"
    eval_interval: int = 200
    # divide each regularizer by the full-width cost of the layers it covers
    normalize_costs: bool = True
    # multiplier on the (normalized) cost, so alpha stays on a readable grid
    cost_scale: float = 0.05
    optimizer: str = "adam"

    def __post_init__(self):
        if self.mode not in ("teacher", "student"):
            raise ConfigError(f"mode: must be 'teacher' or 'student', got {self.mode!r}")
        if self.optimizer != "adam":
            raise ConfigError(f"optimizer: only 'adam' is supported, got {self.optimizer!r}")
        if self.mode == "teacher":
            self.alpha, self.lam, self.temperature = 0.0, 0.0, 1.0
        checks = {
            "alpha": self.alpha >= 0,
            "lam": 0.0 <= self.lam <= 1.0,
            "temperature": self.temperature > 0,
            "gamma_threshold": self.gamma_threshold > 0,
            "iterations": isinstance(self.iterations, int) and self.iterations >= 1,
            "batch_size": isinstance(self.batch_size, int) and self.batch_size >= 1,
            "lr": self.lr > 0,
            "cost_scale": self.cost_scale > 0,
            "eval_interval": isinstance(self.eval_interval, int) and self.eval_interval >= 1,
        }
        for name, ok in checks.items():
            if not ok:
                raise ConfigError(f"{name}: invalid value {getattr(self, name)!r}")

    @property
    def distill(self) -> DistillConfig:
        return DistillConfig(self.temperature, self.lam)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train config fields: {sorted(unknown)}")
        return cls(**d)


METRIC_COLUMNS = ("step", "train_loss", "penalty_value", "eval_accuracy",
                  "relaxed_flop", "relaxed_param", "alive_flop_cost", "alive_param_cost")


@dataclass
class MetricRow:
    step: int
    train_loss: float
    penalty_value: float
    eval_accuracy: float
    relaxed_flop: float
    relaxed_param: float
    alive_flop_cost: int
    alive_param_cost: int


@dataclass
class RunMetrics:
    rows: List[MetricRow] = field(default_factory=list)
    first_loss: Optional[float] = None

    def append(self, row: MetricRow):
        if self.rows and row.step <= self.rows[-1].step:
            raise ValueError("metric steps must be strictly increasing")
        self.rows.append(row)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for r in self.rows:
            w.writerow([r.step, repr(r.train_loss), repr(r.penalty_value), repr(r.eval_accuracy),
                        repr(r.relaxed_flop), repr(r.relaxed_param), r.alive_flop_cost, r.alive_param_cost])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "RunMetrics":
        out = cls()
        for d in csv.DictReader(io.StringIO(text)):
            out.rows.append(MetricRow(
                int(d["step"]), float(d["train_loss"]), float(d["penalty_value"]), float(d["eval_accuracy"]),
                float(d["relaxed_flop"]), float(d["relaxed_param"]),
                int(d["alive_flop_cost"]), int(d["alive_param_cost"])))
        return out

    def summary(self) -> dict:
        last = self.rows[-1] if self.rows else None
        return {"first_loss": self.first_loss, "final": asdict(last) if last else None, "eval_points": len(self.rows)}


@dataclass
class AdamState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(store: ParamStore, grads: Dict[str, np.ndarray], state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    """One bias-corrected Adam update, applied in place to ``store``."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient in tensor {name!r}")
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for name, g in grads.items():
        p = store.tensors[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name!r}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


def _check_teacher(spec: NetworkSpec, teacher) -> Tuple[ParamStore, NetworkSpec]:
    if teacher is None:
        raise CompatibilityError("student mode needs a teacher checkpoint")
    t_store, t_spec = teacher
    if t_spec.num_classes != spec.num_classes:
        raise CompatibilityError(f"teacher predicts {t_spec.num_classes} classes, student spec {spec.num_classes}")
    if t_spec.input_shape != spec.input_shape:
        raise CompatibilityError(f"teacher input {t_spec.input_shape} != student input {spec.input_shape}")
    return t_store, t_spec


def evaluate_point(store, spec, test: Dataset, cfg: TrainConfig, step, train_loss, penalty) -> MetricRow:
    rep = cost_report(spec, store, cfg.gamma_threshold)
    return MetricRow(step, float(train_loss), float(penalty), accuracy(store, spec, test.images, test.labels),
                     rep.total_relaxed_flop, rep.total_relaxed_param, rep.total_flop, rep.total_param)


def train(spec: NetworkSpec, train_data: Dataset, test_data: Dataset, cfg: TrainConfig,
          teacher: Optional[Tuple[ParamStore, NetworkSpec]] = None, init: Optional[ParamStore] = None,
          out_dir=None) -> Tuple[ParamStore, RunMetrics]:
    """Run exactly ``cfg.iterations`` Adam steps on the combined objective.

    Teacher mode minimizes plain cross-entropy from ``build(spec, seed)``.
    Student mode starts from a clone of the teacher (unless ``init`` is
    given) and minimizes the distillation loss plus the partitioned cost
    penalty. Returns the final store and the metric history; with ``out_dir``
    the latest checkpoint and metrics.csv are rewritten at every eval point.
    """
    if train_data.image_shape != spec.input_shape:
        raise CompatibilityError(f"data images {train_data.image_shape} != spec input {spec.input_shape}")
    if train_data.num_classes > spec.num_classes:
        raise CompatibilityError(f"data has {train_data.num_classes} classes, network {spec.num_classes}")
    if cfg.batch_size > len(train_data):
        raise ConfigError(f"batch_size: {cfg.batch_size} exceeds {len(train_data)} training samples")

    t_store = t_spec = None
    if cfg.mode == "student":
        t_store, t_spec = _check_teacher(spec, teacher)
        store = (init if init is not None else t_store).clone()
        t_store = t_store.clone()
    else:
        store = init.clone() if init is not None else build(spec, cfg.seed)
    store.seed = cfg.seed
    store.step = 0

    plan = make_plan(spec, cfg.partition)
    flop_scale = param_scale = cfg.cost_scale
    if cfg.normalize_costs:
        f_set, p_set = set_costs(plan, spec)
        flop_scale = cfg.cost_scale / f_set if f_set else 0.0
        param_scale = cfg.cost_scale / p_set if p_set else 0.0
    dcfg = cfg.distill
    rng = np.random.default_rng(cfg.seed)
    stream = batch_indices(len(train_data), cfg.batch_size, rng)
    state = AdamState()
    metrics = RunMetrics()
    out = Path(out_dir) if out_dir is not None else None

    for step in range(1, cfg.iterations + 1):
        idx = next(stream)
        x, y = train_data.images[idx], train_data.labels[idx]
        z = None
        if dcfg.lam > 0:
            z = soften(forward(t_store, t_spec, x, "eval"), dcfg.temperature, t_store.step)
        tape = ad.Tape()
        logits = forward(store, spec, x, "train", tape=tape)
        loss = distill_loss(logits, y, z, dcfg)
        loss_value = loss.item()
        if not math.isfinite(loss_value):
            raise NumericalError(f"non-finite loss at step {step}")
        if metrics.first_loss is None:
            metrics.first_loss = loss_value
        grads = ad.backward(tape, loss)
        penalty = 0.0
        if cfg.alpha > 0:
            penalty, pg = partition_penalty(plan, spec, store, cfg.alpha, cfg.gamma_threshold,
                                            flop_scale, param_scale)
            for bn, g in pg.items():
                grads[f"{bn}.gamma"] = grads[f"{bn}.gamma"] + g
        adam_step(store, grads, state, cfg.lr)
        store.step = step

        if step % cfg.eval_interval == 0 or step == cfg.iterations:
            row = evaluate_point(store, spec, test_data, cfg, step, loss_value, penalty)
            metrics.append(row)
            logger.info("step %d loss %.4f penalty %.4f acc %.2f flop %d param %d", step, row.train_loss,
                        row.penalty_value, row.eval_accuracy, row.alive_flop_cost, row.alive_param_cost)
            if out is not None:
                save_checkpoint(store, spec, out / "checkpoint")
                atomic_write_text(out / "metrics.csv", metrics.to_csv())
    if out is not None:
        atomic_write_json(out / "summary.json", {"config": cfg.to_dict(), "plan": plan.to_dict(), **metrics.summary()})
    return store, metrics
