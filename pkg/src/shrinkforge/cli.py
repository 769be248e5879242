"""``shrinkforge`` command-line front end.

Exit codes: 0 success, 2 config/parse error, 3 compatibility error,
4 numerical abort, 5 partial sweep failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional

from . import __version__
from . import config as cfgmod
from ._io import atomic_write_json, atomic_write_text, dump_json
from .costs import cost_report
from .errors import (CheckpointError, CheckpointVersionError, CompatibilityError, ConfigError, DataError,
                     NumericalError, PartitionError, PruneError, ShrinkforgeError, SpecError)
from .network import accuracy, load_checkpoint, resolve_spec
from .pruner import prune, reestimate_bn, save_pruned, stage_drop_csv, stage_drop_report
from .trainer import RunMetrics

EXIT_OK, EXIT_CONFIG, EXIT_COMPAT, EXIT_NUMERIC, EXIT_PARTIAL = 0, 2, 3, 4, 5
OUT_ENV = "SHRINKFORGE_OUT"

log = logging.getLogger("shrinkforge")


def _floats(text: str) -> List[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text: str) -> List[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _shape(text: str):
    vals = _ints(text)
    if len(vals) != 3:
        raise argparse.ArgumentTypeError(f"expected C,H,W, got {text!r}")
    return tuple(vals)


def _train_flags(p: argparse.ArgumentParser, student: bool) -> None:
    g = p.add_argument_group("training overrides (flag > config file > default)")
    g.add_argument("--iterations", type=int)
    g.add_argument("--lr", type=float)
    g.add_argument("--seed", type=int)
    g.add_argument("--batch-size", type=int, dest="batch_size")
    g.add_argument("--eval-interval", type=int, dest="eval_interval")
    if student:
        g.add_argument("--alpha", type=float)
        g.add_argument("--partition", help="half | flop | param | idx:<1-based FLOP stages>")
        g.add_argument("--lam", type=float)
        g.add_argument("--temperature", type=float)
        g.add_argument("--threshold", type=float, dest="gamma_threshold")
        g.add_argument("--cost-scale", type=float, dest="cost_scale", help="multiplier on the normalized cost")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="shrinkforge", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"shrinkforge {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-teacher", help="train a teacher network from scratch")
    p.add_argument("--config", help="JSON config or a run manifest to replay")
    p.add_argument("--spec", help="reference name (tiny3, tiny6) or spec JSON path")
    p.add_argument("--out")
    _train_flags(p, student=False)

    p = sub.add_parser("compress", help="distill a cost-regularized student, then prune it")
    p.add_argument("--config")
    p.add_argument("--teacher", help="teacher checkpoint directory")
    p.add_argument("--out")
    _train_flags(p, student=True)

    p = sub.add_parser("prune", help="slice dead channels out of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--threshold", type=float, default=0.01)
    p.add_argument("--config", help="data config used to re-estimate bn statistics and report accuracy")
    p.add_argument("--reference", help="checkpoint whose full cost is the RED baseline")
    p.add_argument("--out")

    p = sub.add_parser("cost", help="exact (and, with a checkpoint, masked and relaxed) costs")
    p.add_argument("spec", nargs="?", default=None, help="reference name or spec JSON path")
    p.add_argument("--checkpoint")
    p.add_argument("--threshold", type=float, default=0.01)
    p.add_argument("--format", choices=("table", "json", "csv"), default="table")
    p.add_argument("--input-shape", type=_shape, dest="input_shape", help="C,H,W for reference specs")
    p.add_argument("--num-classes", type=int, dest="num_classes")
    p.add_argument("--output", help="write to this file instead of stdout")

    p = sub.add_parser("sweep", help="one compression run per (partition, alpha, seed)")
    p.add_argument("--config")
    p.add_argument("--teacher")
    p.add_argument("--alphas", type=_floats)
    p.add_argument("--seeds", type=_ints)
    p.add_argument("--partitions", type=lambda s: [t for t in s.split(";") if t], help="';'-separated list")
    p.add_argument("--parallel", type=int)
    p.add_argument("--out")
    _train_flags(p, student=True)

    p = sub.add_parser("report", help="CSV tables and PNG figures for a run or sweep directory")
    p.add_argument("run_dir")
    p.add_argument("--out", help="report directory (default <run_dir>/report)")
    p.add_argument("--no-figures", action="store_true")
    return parser


def _overrides(args) -> dict:
    keys = ("iterations", "lr", "seed", "batch_size", "eval_interval", "alpha", "partition", "lam",
            "temperature", "gamma_threshold", "cost_scale")
    train = {k: getattr(args, k) for k in keys if getattr(args, k, None) is not None}
    out = {"train": train}
    if getattr(args, "teacher", None):
        out["teacher"] = args.teacher
    if getattr(args, "spec", None) and args.command == "train-teacher":
        out["spec"] = args.spec
    return out


def _doc(args) -> dict:
    base = cfgmod.load(args.config) if args.config else {}
    doc = cfgmod.merge(base, _overrides(args))
    cfgmod.validate(doc)
    return doc


def _out_dir(args, doc: dict, command: str) -> Path:
    if getattr(args, "out", None):
        return Path(args.out)
    if doc.get("out_dir"):
        return Path(doc["out_dir"])
    digest = hashlib.sha256(dump_json(doc).encode()).hexdigest()[:10]
    return Path(os.environ.get(OUT_ENV, "runs")) / f"{command}-{digest}"


def _cmd_train_teacher(args) -> int:
    from .runs import run_teacher
    doc = _doc(args)
    out = _out_dir(args, doc, "train-teacher")
    res = run_teacher(doc, out)
    print(f"teacher accuracy {res['accuracy']:.2f}% -> {out}")
    return EXIT_OK


def _cmd_compress(args) -> int:
    from .runs import run_compress
    doc = _doc(args)
    out = _out_dir(args, doc, "compress")
    res = run_compress(doc, out)
    print(f"acc unpruned {res['acc_unpruned']:.2f}%  pruned {res['acc_pruned']:.2f}%  "
          f"RED flop {res['red_flop']:.1f}%  param {res['red_param']:.1f}% -> {out}")
    return EXIT_OK


def _cmd_prune(args) -> int:
    from .runs import load_data
    store, spec = load_checkpoint(args.checkpoint)
    ref_spec = load_checkpoint(args.reference)[1] if args.reference else None
    structure = prune(store, spec, args.threshold, reference=ref_spec)
    extra = {"source": str(Path(args.checkpoint).resolve())}
    if args.config:
        doc = cfgmod.resolve(cfgmod.load(args.config), "student")
        train_set, test_set = load_data(doc["data"])
        if train_set.image_shape != spec.input_shape or train_set.num_classes != spec.num_classes:
            raise CompatibilityError("config data does not match the checkpoint's input shape or class count")
        extra["acc_unpruned"] = accuracy(store, spec, test_set.images, test_set.labels)
        if doc["prune"]["bn_batches"] > 0:
            structure.compact_store = reestimate_bn(structure.compact_store, structure.compact_spec, train_set,
                                                    doc["prune"]["bn_batches"], doc["train"]["batch_size"],
                                                    doc["train"]["seed"])
        extra["acc_pruned"] = accuracy(structure.compact_store, structure.compact_spec,
                                       test_set.images, test_set.labels)
    out = Path(args.out) if args.out else Path(args.checkpoint).parent / "pruned"
    save_pruned(structure, out, None, extra)
    atomic_write_text(out / "stage_drop.csv", stage_drop_csv(stage_drop_report(structure)))
    print(f"RED flop {structure.red_flop:.1f}%  param {structure.red_param:.1f}% -> {out}")
    return EXIT_OK


def _table(report) -> str:
    cols = ("layer", "flop", "param", "relaxed_flop", "relaxed_param", "alive_in", "alive_out")
    rows = [[l.layer, str(l.flop), str(l.param), f"{l.relaxed_flop:.6g}", f"{l.relaxed_param:.6g}",
             str(l.alive_in), str(l.alive_out)] for l in report.per_layer]
    t = report.totals()
    rows.append(["total", str(t["flop"]), str(t["param"]), f"{t['relaxed_flop']:.6g}",
                 f"{t['relaxed_param']:.6g}", "", ""])
    widths = [max(len(c), *(len(r[i]) for r in rows)) for i, c in enumerate(cols)]
    line = lambda cells: "  ".join(c.rjust(w) if i else c.ljust(w) for i, (c, w) in enumerate(zip(cells, widths)))  # noqa: E731
    return "\n".join([line(cols), line(["-" * w for w in widths])] + [line(r) for r in rows]) + "\n"


def _cmd_cost(args) -> int:
    store = None
    if args.checkpoint:
        store, spec = load_checkpoint(args.checkpoint)
        if args.spec:
            other = resolve_spec(args.spec, args.input_shape or spec.input_shape, args.num_classes or spec.num_classes)
            if other.to_dict() != spec.to_dict():
                raise CompatibilityError("spec does not match the checkpoint architecture")
    elif args.spec:
        spec = resolve_spec(args.spec, args.input_shape, args.num_classes)
    else:
        raise ConfigError("spec: give a spec or --checkpoint")
    report = cost_report(spec, store, args.threshold)
    if args.format == "csv":
        text = report.to_csv()
    elif args.format == "json":
        text = dump_json(report.to_dict())
    else:
        text = _table(report)
    if args.output:
        atomic_write_text(args.output, text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def _cmd_sweep(args) -> int:
    from .runs import run_sweep
    doc = _doc(args)
    stored = doc.get("sweep", {})
    alphas = args.alphas or stored.get("alphas")
    seeds = args.seeds if args.seeds is not None else stored.get("seeds")
    if not alphas or not seeds:
        raise ConfigError("sweep: --alphas and --seeds must be non-empty")
    partitions = args.partitions or stored.get("partitions")
    parallel = args.parallel or stored.get("parallel", 1)
    out = _out_dir(args, doc, "sweep")
    rows, agg = run_sweep(doc, alphas, seeds, out, partitions, parallel)
    failed = [r for r in rows if r["status"] != "ok"]
    for r in agg:
        print(f"{r['partition']:>10} alpha {r['alpha']:<6g} acc {r['acc_pruned_mean']:.2f}+-{r['acc_pruned_std']:.2f}  "
              f"RED flop {r['red_flop_mean']:.1f}  param {r['red_param_mean']:.1f}  ({r['failed']} failed)")
    for r in failed:
        print(f"failed: {r['dir']}: {r['error']}", file=sys.stderr)
    print(f"{len(rows) - len(failed)}/{len(rows)} runs ok -> {out}")
    return EXIT_PARTIAL if failed else EXIT_OK


def _cmd_report(args) -> int:
    from . import plotting
    from .runs import read_csv_rows
    run = Path(args.run_dir)
    out = Path(args.out) if args.out else run / "report"
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if (run / "aggregate.csv").is_file():
        agg = read_csv_rows(run / "aggregate.csv")
        atomic_write_text(out / "aggregate.csv", (run / "aggregate.csv").read_text())
        written.append("aggregate.csv")
        if not args.no_figures:
            plotting.tradeoff(agg, out / "tradeoff.png")
            written.append("tradeoff.png")
    elif (run / "metrics.csv").is_file():
        metrics = RunMetrics.from_csv((run / "metrics.csv").read_text())
        atomic_write_text(out / "metrics.csv", metrics.to_csv())
        written.append("metrics.csv")
        if not args.no_figures and metrics.rows:
            plotting.training_curves(metrics.rows, out / "training.png")
            written.append("training.png")
        if (run / "stage_drop.csv").is_file():
            rows = read_csv_rows(run / "stage_drop.csv")
            atomic_write_text(out / "stage_drop.csv", (run / "stage_drop.csv").read_text())
            written.append("stage_drop.csv")
            if not args.no_figures:
                plotting.stage_drop(rows, out / "stage_drop.png")
                written.append("stage_drop.png")
        if (run / "result.json").is_file():
            atomic_write_json(out / "result.json", json.loads((run / "result.json").read_text()))
            written.append("result.json")
    else:
        raise ConfigError(f"run_dir: {run} holds neither aggregate.csv nor metrics.csv")
    for name in written:
        print(out / name)
    return EXIT_OK


COMMANDS = {
    "train-teacher": _cmd_train_teacher,
    "compress": _cmd_compress,
    "prune": _cmd_prune,
    "cost": _cmd_cost,
    "sweep": _cmd_sweep,
    "report": _cmd_report,
}


def exit_code(exc: BaseException) -> int:
    if isinstance(exc, (CompatibilityError, CheckpointVersionError)):
        return EXIT_COMPAT
    if isinstance(exc, (NumericalError, PruneError)):
        return EXIT_NUMERIC
    if isinstance(exc, (ConfigError, SpecError, DataError, PartitionError, CheckpointError, FileNotFoundError)):
        return EXIT_CONFIG
    return 1


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ShrinkforgeError, FileNotFoundError) as exc:
        code = exit_code(exc)
        print(f"shrinkforge {args.command}: error: {exc}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
