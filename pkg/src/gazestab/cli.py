"""Experiment driver.

Subcommands::

    gazestab run        one scenario / controller cell
    gazestab matrix     the scenario x controller plan, with repetitions
    gazestab compare    rankings and reafference margin from a report
    gazestab dump-trace extract channels from a trace file for plotting

Configs are YAML documents (see ``default_config``). Command-line flags
override individual keys. The default output directory is taken from
``GAZESTAB_OUT`` and falls back to ``./gazestab-out``.
"""

from __future__ import annotations

import argparse
import copy
import csv
import datetime as _dt
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from ._pysim import SimulationAbort
from .controllers import IkConfig
from .kinematics import KinematicChain, canonical_chain
from .scenarios import ScenarioConfig, ScenarioKind, read_trace_csv, run
from .sensors import ScenarioFault, SensorConfig

log = logging.getLogger("gazestab")

REPORT_SCHEMA = "gazestab-report/1"
COMPARE_SCHEMA = "gazestab-compare/1"
CONFIG_SCHEMA = "gazestab-config/1"
OUT_ENV = "GAZESTAB_OUT"

ALL_SCENARIOS = tuple(k.value for k in ScenarioKind)
ALL_CONTROLLERS = ("none", "ik", "vor", "okr", "reafference", "sum", "mean")
INDIVIDUAL = ("ik", "vor", "okr")


def default_config() -> dict:
    cfg = ScenarioConfig.reference(ScenarioKind.SELF_ROBOT)
    d = cfg.to_dict()
    d["schema"] = CONFIG_SCHEMA
    d.pop("chain")
    d["experiment"] = {
        "scenarios": list(ALL_SCENARIOS),
        "controllers": list(ALL_CONTROLLERS),
        "repetitions": 5,
        "workers": 1,
        "write_traces": False,
        "reference_perturbations": True,
    }
    return d


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in (over or {}).items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def load_config(path: str | os.PathLike | None) -> dict:
    doc = default_config()
    if path is None:
        return doc
    with open(path) as fh:
        user = yaml.safe_load(fh) or {}
    if not isinstance(user, dict):
        raise ValueError(f"{path}: config must be a mapping")
    schema = user.get("schema", CONFIG_SCHEMA)
    if schema != CONFIG_SCHEMA:
        raise ValueError(f"{path}: unsupported config schema {schema!r}")
    return _merge(doc, user)


def config_from_dict(doc: dict, scenario: str | None = None, controller: str | None = None,
                     seed: int | None = None) -> ScenarioConfig:
    """Build a ScenarioConfig from a config document plus optional overrides."""
    sc = doc.get("scenario", {})
    sens = doc.get("sensors", {})
    ctl = doc.get("controller", {})
    kind = ScenarioKind.parse(scenario or sc.get("kind", "SelfRobot"))
    kwargs = {}
    use_reference = doc.get("experiment", {}).get("reference_perturbations", True)
    if scenario is not None and use_reference:
        # switching scenario picks that scenario's reference perturbation
        cfg0 = ScenarioConfig.reference(kind)
        kwargs.update(amplitude=cfg0.amplitude, frequency=cfg0.frequency)
    else:
        kwargs.update(amplitude=float(sc.get("amplitude", 0.48)), frequency=float(sc.get("frequency", 0.125)))
    grid = sc.get("grid", {})

    def sensor(d: dict, default: SensorConfig) -> SensorConfig:
        return SensorConfig(
            rate=float(d.get("rate", default.rate)),
            latency=float(d.get("latency", default.latency)),
            noise_std=float(d.get("noise_std", default.noise_std)),
            seed=d.get("seed"),
        )

    ik = ctl.get("ik", {})
    name = controller or ctl.get("name", "none")
    combiner = ctl.get("combiner", "reafference")
    chain = KinematicChain.from_dict(doc["chain"]) if doc.get("chain") else canonical_chain()
    return ScenarioConfig(
        kind=kind,
        duration=float(sc.get("duration", 32.0)),
        target_distance=float(sc.get("target_distance", 2.0)),
        control_rate=float(sc.get("control_rate", 1000.0)),
        focal=float(sc.get("focal", 1.0)),
        grid_width=int(grid.get("width", 17)),
        grid_height=int(grid.get("height", 13)),
        half_angle=float(grid.get("half_angle", 0.4)),
        gyro=sensor(sens.get("gyro", {}), SensorConfig.gyro_default()),
        camera=sensor(sens.get("camera", {}), SensorConfig.camera_default()),
        controller=name,
        combiner=combiner,
        k_vor=float(ctl.get("k_vor", 1.0)),
        k_okr=float(ctl.get("k_okr", 0.8)),
        voluntary_eye_rate=tuple(ctl.get("voluntary_eye_rate", (0.0, 0.0))),
        ik=IkConfig(
            Kp=float(ik.get("Kp", 0.0)),
            damping=float(ik.get("damping", 0.01)),
            weight_flow=float(ik.get("weight_flow", 0.1)),
            weight_head=float(ik.get("weight_head", 1.0)),
        ),
        seed=int(doc.get("seed", 0) if seed is None else seed),
        chain=chain,
        **kwargs,
    )


# -- experiment plan ---------------------------------------------------------


@dataclass
class Cell:
    scenario: str
    controller: str


@dataclass
class ExperimentPlan:
    doc: dict
    cells: list[Cell]
    out_dir: Path
    repetitions: int = 5
    base_seed: int = 0
    workers: int = 1
    write_traces: bool = False

    def __post_init__(self):
        if not self.cells:
            raise ValueError("experiment plan needs at least one cell")
        if self.repetitions < 1:
            raise ValueError("repetitions must be >= 1")

    def seeds(self) -> list[int]:
        return [self.base_seed + r for r in range(self.repetitions)]


def _split(values) -> list[str]:
    out = []
    for v in values or []:
        out.extend(x for x in str(v).split(",") if x)
    return out


def plan_from_config(doc: dict, out_dir: Path, scenarios=None, controllers=None, seed=None,
                     repetitions=None, workers=None, write_traces=None) -> ExperimentPlan:
    exp = doc.get("experiment", {})
    scen = _split(scenarios) or list(exp.get("scenarios", ALL_SCENARIOS))
    ctrl = _split(controllers) or list(exp.get("controllers", ALL_CONTROLLERS))
    cells = [Cell(ScenarioKind.parse(s).value, c.lower()) for s in scen for c in ctrl]
    return ExperimentPlan(
        doc=doc,
        cells=cells,
        out_dir=Path(out_dir),
        repetitions=int(repetitions if repetitions is not None else exp.get("repetitions", 5)),
        base_seed=int(seed if seed is not None else doc.get("seed", 0)),
        workers=int(workers if workers is not None else exp.get("workers", 1)),
        write_traces=bool(write_traces if write_traces is not None else exp.get("write_traces", False)),
    )


def _run_cell(args) -> dict:
    doc, cell, seeds, trace_dir = args
    row = {"scenario": cell.scenario, "controller": cell.controller}
    try:
        cfg0 = config_from_dict(doc, cell.scenario, cell.controller, seeds[0])
    except (ValueError, KeyError, TypeError) as exc:
        row.update(status="invalid", error=str(exc))
        return row
    indices, clamps, faults, singular = [], 0, 0, 0
    try:
        for seed in seeds:
            cfg = cfg0.with_(seed=seed)
            trace = run(cfg)
            indices.append(trace.index().value)
            clamps += trace.clamp_count()
            faults += trace.faults
            singular += trace.singular_ticks
            if trace_dir is not None:
                stem = f"{cell.scenario}_{cell.controller}_seed{seed}"
                trace.write_csv(Path(trace_dir) / f"{stem}.csv")
                trace.write_flow(Path(trace_dir) / f"{stem}_flow.npz")
    except SimulationAbort as exc:
        row.update(status="aborted", error=str(exc))
        return row
    except ScenarioFault as exc:
        row.update(status="fault", error=str(exc))
        return row
    row.update(
        status="ok",
        index_mean=float(np.mean(indices)),
        index_std=float(np.std(indices)),
        indices=[float(v) for v in indices],
        seeds=list(seeds),
        clamp_events=int(clamps),
        faults=int(faults),
        singular_ticks=int(singular),
        config_hash=cfg0.with_(seed=seeds[0]).config_hash(),
    )
    return row


def run_matrix(plan: ExperimentPlan) -> dict:
    """Execute every cell; rows come back in plan order whatever the worker count."""
    trace_dir = None
    if plan.write_traces:
        trace_dir = plan.out_dir / "traces"
        trace_dir.mkdir(parents=True, exist_ok=True)
    jobs = [(plan.doc, cell, plan.seeds(), trace_dir) for cell in plan.cells]
    if plan.workers > 1:
        with ProcessPoolExecutor(max_workers=plan.workers) as pool:
            rows = list(pool.map(_run_cell, jobs))
    else:
        rows = [_run_cell(job) for job in jobs]
    for row in rows:
        if row["status"] != "ok":
            log.error("%s/%s: %s", row["scenario"], row["controller"], row["error"])
    return {
        "schema": REPORT_SCHEMA,
        "tool_version": __version__,
        "repetitions": plan.repetitions,
        "seeds": plan.seeds(),
        "cells": rows,
    }


def report_table(report: dict) -> str:
    lines = [f"{'scenario':<15} {'controller':<12} {'index [deg/s]':>14} {'std':>9} {'clamps':>7} {'status':>8}"]
    for row in report["cells"]:
        if row["status"] == "ok":
            lines.append(
                f"{row['scenario']:<15} {row['controller']:<12} {row['index_mean']:>14.4f} "
                f"{row['index_std']:>9.4f} {row['clamp_events']:>7d} {row['status']:>8}"
            )
        else:
            lines.append(f"{row['scenario']:<15} {row['controller']:<12} {'-':>14} {'-':>9} {'-':>7} {row['status']:>8}")
    return "\n".join(lines) + "\n"


def write_report(report: dict, out_dir: Path, name: str = "report") -> Path:
    """Deterministic report files plus a separate timestamp block."""
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"{name}.json"
    path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    (out_dir / f"{name}.txt").write_text(report_table(report))
    meta = {
        "schema": "gazestab-metadata/1",
        "created": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
        "report": path.name,
    }
    (out_dir / f"{name}.meta.json").write_text(json.dumps(meta, indent=2) + "\n")
    return path


def load_report(path) -> dict:
    report = json.loads(Path(path).read_text())
    if report.get("schema") != REPORT_SCHEMA:
        raise ValueError(f"{path}: not a {REPORT_SCHEMA} document")
    return report


# -- comparison --------------------------------------------------------------


def rank(values: dict[str, float], rel_tol: float = 1e-12) -> list[list[str]]:
    """Groups of controllers ordered by index; equal indices share a group."""
    items = sorted(values.items(), key=lambda kv: (kv[1], kv[0]))
    groups: list[list[str]] = []
    last = None
    for name, v in items:
        if last is not None and abs(v - last) <= rel_tol * max(abs(v), abs(last), 1e-300):
            groups[-1].append(name)
        else:
            groups.append([name])
        last = v
    return groups


def compare(report: dict) -> dict:
    """Per-scenario ranking and the reafference-vs-best-individual margin."""
    by_scenario: dict[str, dict[str, float]] = {}
    for row in report["cells"]:
        if row.get("status") == "ok":
            by_scenario.setdefault(row["scenario"], {})[row["controller"]] = row["index_mean"]
    scenarios = []
    for name in sorted({row["scenario"] for row in report["cells"]}):
        values = by_scenario.get(name, {})
        entry = {"scenario": name, "ranking": rank(values)}
        present = [c for c in INDIVIDUAL if c in values]
        missing = [c for c in INDIVIDUAL + ("reafference",) if c not in values]
        if missing:
            entry["margin"] = {"status": "incomparable", "missing": missing}
        else:
            best = min(present, key=lambda c: (values[c], c))
            entry["margin"] = {
                "status": "ok",
                "best_individual": best,
                "best_index": values[best],
                "reafference_index": values["reafference"],
                "ratio": values["reafference"] / values[best] if values[best] > 0 else float("inf"),
            }
        scenarios.append(entry)
    return {"schema": COMPARE_SCHEMA, "scenarios": scenarios}


def compare_table(result: dict) -> str:
    lines = []
    for entry in result["scenarios"]:
        ranking = " < ".join(" = ".join(g) for g in entry["ranking"]) or "(no data)"
        lines.append(f"{entry['scenario']}: {ranking}")
        m = entry["margin"]
        if m["status"] == "ok":
            lines.append(
                f"  reafference / best individual ({m['best_individual']}) = {m['ratio']:.3f}"
            )
        else:
            lines.append(f"  reafference margin: incomparable (missing {', '.join(m['missing'])})")
    return "\n".join(lines) + "\n"


# -- command line ------------------------------------------------------------


def _out_dir(arg) -> Path:
    return Path(arg or os.environ.get(OUT_ENV) or "gazestab-out")


def cmd_run(args) -> int:
    doc = load_config(args.config)
    controller = args.combiner or args.controller
    cfg = config_from_dict(doc, args.scenario, controller, args.seed)
    out = _out_dir(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        trace = run(cfg)
    except SimulationAbort as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return 3
    stem = f"{cfg.kind.value}_{cfg.label}_seed{cfg.seed}"
    trace.write_csv(out / f"{stem}.csv")
    trace.write_flow(out / f"{stem}_flow.npz")
    idx = trace.index().value
    print(f"{cfg.kind.value} {cfg.label} seed={cfg.seed}: index = {idx:.4f} deg/s "
          f"(clamps {trace.clamp_count()}, faults {trace.faults})")
    print(f"trace written to {out / (stem + '.csv')}")
    return 0


def cmd_matrix(args) -> int:
    doc = load_config(args.config)
    controllers = args.controller
    if args.combiner:
        controllers = (controllers or []) + args.combiner
    plan = plan_from_config(
        doc, _out_dir(args.out), args.scenario, controllers, args.seed,
        args.repetitions, args.workers, True if args.traces else None,
    )
    report = run_matrix(plan)
    path = write_report(report, plan.out_dir)
    sys.stdout.write(report_table(report))
    print(f"report written to {path}")
    return 0 if all(r["status"] == "ok" for r in report["cells"]) else 2


def cmd_compare(args) -> int:
    report = load_report(args.report)
    result = compare(report)
    sys.stdout.write(compare_table(result))
    if args.out:
        Path(args.out).write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
    return 0


def cmd_dump_trace(args) -> int:
    header, data = read_trace_csv(args.trace)
    keep = [i for i, h in enumerate(header) if h == "t" or not args.channels
            or any(h.startswith(c) for c in args.channels)]
    if args.channels and len(keep) == 1:
        print(f"no column matches {args.channels}", file=sys.stderr)
        return 1
    fh = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        writer = csv.writer(fh)
        writer.writerow([header[i] for i in keep])
        for row in data[:: max(1, args.every)]:
            writer.writerow([repr(float(row[i])) for i in keep])
    finally:
        if args.out:
            fh.close()
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gazestab", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, multi: bool):
        sp.add_argument("--config", help="YAML config file")
        nargs = "*" if multi else None
        sp.add_argument("--scenario", nargs=nargs, help="SelfRobot, ExternalRobot or ExternalTarget")
        sp.add_argument("--controller", nargs=nargs, help="none, ik, vor, okr or a combiner name")
        sp.add_argument("--combiner", nargs=nargs, help="reafference, sum or mean")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help=f"output directory (default ${OUT_ENV} or ./gazestab-out)")

    sp = sub.add_parser("run", help="run one cell")
    common(sp, multi=False)
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("matrix", help="run the scenario x controller matrix")
    common(sp, multi=True)
    sp.add_argument("--repetitions", type=int)
    sp.add_argument("--workers", type=int)
    sp.add_argument("--traces", action="store_true", help="write per-run traces")
    sp.set_defaults(func=cmd_matrix)

    sp = sub.add_parser("compare", help="rank controllers in a report")
    sp.add_argument("report")
    sp.add_argument("--out", help="write the comparison as JSON")
    sp.set_defaults(func=cmd_compare)

    sp = sub.add_parser("dump-trace", help="extract trace channels")
    sp.add_argument("trace")
    sp.add_argument("--channels", nargs="*", help="column prefixes, e.g. gyro_aff slip_exaf")
    sp.add_argument("--every", type=int, default=1, help="keep every n-th row")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_dump_trace)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, KeyError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
