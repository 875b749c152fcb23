"""Command-line entry point: ``shopstream <command> [options]``."""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import datasets, evaluation, pcal, sesc
from .agents import AgentError, all_rules, parse_agent
from .generator import generate_instance
from .metrics import observed_metrics
from .model import SCHEMA_VERSION, EventStream, InputConfig, derive_seed, validate_config, validate_stream
from .serialize import SchemaError, canonical, dumps, load
from .sim import SimulationError, serve_stdio, simulate
from .ssi import ssi

CONFIG_DIR_ENV = "SHOPSTREAM_CONFIG_DIR"

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_NOT_CONVERGED = 3
EXIT_VERIFY = 4


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_INVALID):
        super().__init__(message)
        self.code = code


def resolve(path: str) -> Path:
    """Relative paths that do not exist are looked up in the config dir."""
    p = Path(path)
    if p.is_absolute() or p.exists():
        return p
    base = os.environ.get(CONFIG_DIR_ENV)
    if base and (Path(base) / p).exists():
        return Path(base) / p
    return p


def _read_doc(path: str, expect: str):
    p = resolve(path)
    if not p.exists():
        raise CliError(f"{path}: no such file")
    try:
        return load(p, expect)
    except SchemaError as exc:
        raise CliError(f"{path}: {exc}") from None


def _load_config(path: str) -> InputConfig:
    cfg = _read_doc(path, "config")
    report = validate_config(cfg)
    if not report.ok:
        raise CliError(f"{path}: " + "; ".join(report.messages()))
    return cfg


def _load_instance(path: str) -> EventStream:
    stream = _read_doc(path, "instance")
    report = validate_stream(stream)
    if not report.ok:
        raise CliError(f"{path}: " + "; ".join(report.messages()))
    return stream


def sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_text(path: str | Path, text: str) -> Path:
    p = Path(path)
    if p.parent and not p.parent.exists():
        p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(text, encoding="utf-8")
    return p


def _emit(args, data: dict, text: str | None = None) -> None:
    if args.format == "json" or text is None:
        print(json.dumps(data, sort_keys=True, indent=1, default=float))
    else:
        print(text)


def _clean(obj):
    """Make a nested structure JSON-safe (numpy scalars, infinities)."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        x = float(obj)
        return x if np.isfinite(x) else None
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    return obj


# ---------------------------------------------------------------------------
# Single-instance commands
# ---------------------------------------------------------------------------


def cmd_generate(args) -> int:
    cfg = _load_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    stream = generate_instance(cfg)
    out = _write_text(args.out, dumps(stream))
    _emit(args, {"out": str(out), "events": len(stream.events), "jobs": len(stream.jobs), "sha256": sha256(out)},
          f"wrote {out} ({len(stream.jobs)} jobs, {len(stream.events)} events)")
    return EXIT_OK


def cmd_calibrate(args) -> int:
    stream = _load_instance(args.instance)
    seed = args.seed if args.seed is not None else stream.config.seed
    if args.mode == "sesc":
        cfg = sesc.CalibratorConfig(tol=args.tol, max_iter=args.max_iter, seed=seed, disabled=tuple(args.disable))
        out_stream, report = sesc.calibrate(stream, cfg)
        summary = report.as_dict()
        converged = report.relaxed
    else:
        mcfg = pcal.MooConfig(
            mode="moo-12d" if args.mode == "moo" else "hybrid-5d",
            generations=args.generations,
            population=args.population,
            tol=args.tol,
            seed=seed,
        )
        res = pcal.calibrate_parameters(stream.config, mcfg)
        out_stream = res.stream
        thresholds = mcfg.thresholds()
        summary = {
            "x": res.x.tolist(),
            "objectives": res.objectives.tolist(),
            "final_l2": res.l2,
            "wall_clock": res.wall_clock,
            "archive_size": len(res.archive),
            "evaluations": res.archive.evaluations,
        }
        converged = bool(np.all(res.objectives <= thresholds)) and res.l2 <= args.tol
        if args.pareto:
            pareto = {"X": res.archive.X.tolist(), "F": res.archive.F.tolist(), "selected": res.x.tolist()}
            _write_text(args.pareto, canonical(_clean(pareto)) + "\n")
    if out_stream is None:
        raise CliError("calibration produced no instance", EXIT_NOT_CONVERGED)
    out = _write_text(args.out, dumps(out_stream))
    summary = _clean({**summary, "converged": converged, "out": str(out), "sha256": sha256(out)})
    if args.report:
        _write_text(args.report, json.dumps(summary, sort_keys=True, indent=1) + "\n")
    _emit(args, summary, f"wrote {out}: final l2 {summary['final_l2']:.4f} ({'converged' if converged else 'not converged'})")
    return EXIT_OK if converged else EXIT_NOT_CONVERGED


def cmd_metrics(args) -> int:
    stream = _load_instance(args.instance)
    traj = evaluation.read_trajectory(resolve(args.trajectory)) if args.trajectory else None
    m = observed_metrics(stream, traj)
    data = _clean(m.as_dict())
    lines = [f"{k:>20} {v}" for k, v in data.items()]
    _emit(args, data, "\n".join(lines))
    return EXIT_OK


def cmd_score(args) -> int:
    stream = _load_instance(args.instance)
    c = ssi(observed_metrics(stream))
    _emit(args, _clean(c.as_dict()), f"SSI {c.d:.2f} ({c.bucket})")
    return EXIT_OK


def cmd_simulate(args) -> int:
    stream = _load_instance(args.instance)
    if args.stdio:
        traj = serve_stdio(stream, sys.stdin, sys.stdout, level=args.level)
    else:
        try:
            agent = parse_agent(args.agent)
        except AgentError as exc:
            raise CliError(str(exc)) from None
        traj = simulate(stream, agent, instance=Path(args.instance).stem)
    if args.out:
        evaluation.write_trajectory(traj, args.out)
    if args.gantt:
        _write_text(args.gantt, json.dumps(evaluation.gantt(traj), sort_keys=True) + "\n")
    report = evaluation.verify(traj, stream)
    k = evaluation.kpis(traj, stream)
    if not args.stdio:
        _emit(
            args,
            {"agent": traj.agent, "makespan": k.makespan, "mean_tardiness": k.mean_tardiness,
             "complete": k.complete, "violations": len(report.faults)},
            f"{traj.agent}: makespan {k.makespan:.2f}, mean tardiness {k.mean_tardiness:.2f}",
        )
    return EXIT_OK if report.ok else EXIT_VERIFY


def cmd_verify(args) -> int:
    stream = _load_instance(args.instance)
    try:
        traj = evaluation.read_trajectory(resolve(args.trajectory))
    except (OSError, ValueError) as exc:
        raise CliError(f"{args.trajectory}: {exc}") from None
    report = evaluation.verify(traj, stream)
    text = "ok" if report.ok else "\n".join(f"{f.kind}: {f.message}" for f in report.faults)
    _emit(args, report.as_dict(), text)
    return EXIT_OK if report.ok else EXIT_VERIFY


def cmd_evaluate(args) -> int:
    path = resolve(args.matrix)
    try:
        spec = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CliError(f"{args.matrix}: {exc}") from None
    for key in ("instances", "agents"):
        if not spec.get(key):
            raise CliError(f"{args.matrix}: '{key}' must be a nonempty list")
    agents = []
    for a in spec["agents"]:
        if a == "pdr:all":
            agents += [f"pdr:{r.name}" for r in all_rules()]
        else:
            try:
                parse_agent(a)
            except AgentError as exc:
                raise CliError(str(exc)) from None
            agents.append(a)
    instances = []
    for p in spec["instances"]:
        q = Path(p) if Path(p).is_absolute() else path.parent / p
        instances.append((Path(p).stem, _load_instance(str(q))))
    matrix = evaluation.run_matrix(instances, agents, spec.get("seeds", [0]), out_dir=args.trajectories)
    out = _write_text(args.out, matrix.export() + "\n")
    failed = [c for c in matrix.cells if not c.ok]
    _emit(args, {"out": str(out), "cells": len(matrix.cells), "failed": len(failed), "best": matrix.best()},
          f"wrote {out}: {len(matrix.cells)} cells, {len(failed)} failed")
    return EXIT_VERIFY if failed else EXIT_OK


def cmd_subset(args) -> int:
    path = resolve(args.features)
    try:
        rows = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CliError(f"{args.features}: {exc}") from None
    if not isinstance(rows, list) or not rows:
        raise CliError(f"{args.features}: expected a nonempty list of records")
    try:
        ids = [r["id"] for r in rows]
        X = np.array([r["features"] for r in rows], float)
        difficulty = np.array([r.get("difficulty", 0.0) for r in rows], float)
    except (KeyError, TypeError, ValueError) as exc:
        raise CliError(f"{args.features}: malformed record ({exc})") from None
    groups = [r.get("dataset", "") for r in rows]
    rank = evaluation.percentile_rank(difficulty, groups)
    Z = np.column_stack([X, rank])
    try:
        chosen = evaluation.kcenter_subset(Z, args.k)
    except ValueError as exc:
        raise CliError(str(exc)) from None
    data = {"k": args.k, "selected": [ids[i] for i in chosen], "radius": evaluation.coverage_radius(Z, chosen)}
    if args.out:
        _write_text(args.out, json.dumps(data, indent=1) + "\n")
    _emit(args, data, f"selected {len(chosen)} of {len(ids)} (radius {data['radius']:.3f})")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Suites
# ---------------------------------------------------------------------------


def _build_one(task: tuple) -> dict:
    """Generate, calibrate and score one instance; never raises."""
    name, levels, seed, out_dir, calibrate, kwargs = task
    rec = {"name": name, "seed": seed, "levels": levels}
    try:
        if "scale" in kwargs:
            cfg = datasets.scale_config(kwargs["scale"], seed=derive_seed(seed, name))
        else:
            cfg = datasets.make_config(levels, seed=derive_seed(seed, name), n_jobs=kwargs.get("n_jobs", datasets.DESK_JOBS))
        report = validate_config(cfg)
        if not report.ok:
            raise ValueError("; ".join(report.messages()))
        stream = generate_instance(cfg)
        if calibrate:
            stream, cal = sesc.calibrate(stream, sesc.CalibratorConfig(seed=seed))
            rec.update(final_l2=cal.final_l2, relaxed=cal.relaxed, strict=cal.strict)
        score = ssi(observed_metrics(stream))
        rec.update(ssi=score.d, bucket=score.bucket)
        path = Path(out_dir) / f"{name}_s{seed}.json"
        _write_text(path, dumps(stream))
        rec.update(path=path.name, sha256=sha256(path), status="ok")
    except Exception as exc:  # recorded per cell, not fatal
        rec.update(status="infeasible", error=f"{type(exc).__name__}: {exc}")
    return rec


def _run_suite(args, tasks: list[tuple], stage: str) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            records = list(pool.map(_build_one, tasks))
    else:
        records = [_build_one(t) for t in tasks]
    stages = [{"name": "generate", "depends_on": []}, {"name": "score", "depends_on": ["generate"]}]
    if not args.no_calibrate:
        stages.insert(1, {"name": "calibrate", "depends_on": ["generate"]})
        stages[-1]["depends_on"] = ["calibrate"]
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "kind": "manifest",
        "suite": stage,
        "seed": args.seed,
        "stages": stages,
        "instances": records,
    }
    mpath = _write_text(out_dir / "manifest.json", json.dumps(_clean(manifest), sort_keys=True, indent=1) + "\n")
    bad = sum(1 for r in records if r["status"] != "ok")
    _emit(args, {"manifest": str(mpath), "instances": len(records), "infeasible": bad},
          f"wrote {len(records)} instances to {out_dir} ({bad} infeasible)")
    return EXIT_OK


def _parse_levels(items) -> dict:
    levels = {}
    for item in items or ():
        key, sep, values = item.partition("=")
        if not sep or key not in datasets.GRID_LEVELS:
            raise CliError(f"--level expects NAME=v1,v2,... with NAME in {sorted(datasets.GRID_LEVELS)}")
        try:
            levels[key] = tuple(float(v) for v in values.split(","))
        except ValueError:
            raise CliError(f"--level {item}: values must be numbers") from None
    return levels


def cmd_grid(args) -> int:
    levels = dict(datasets.GRID_LEVELS)
    if args.levels:
        try:
            custom = json.loads(resolve(args.levels).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise CliError(f"{args.levels}: {exc}") from None
        levels = {k: tuple(v) for k, v in custom.items()}
    custom = _parse_levels(args.level)
    if custom:
        levels = custom if args.only else {**levels, **custom}
    unknown = set(levels) - set(datasets.GRID_LEVELS)
    if unknown:
        raise CliError(f"unknown grid dimensions {sorted(unknown)}")
    seeds = [derive_seed(args.seed, "grid", i) % 2**31 for i in range(args.seeds)]
    tasks = [
        (datasets.cell_name(cell), cell, s, args.out, not args.no_calibrate, {"n_jobs": args.n_jobs})
        for cell in datasets.grid_cells(levels)
        for s in seeds
    ]
    return _run_suite(args, tasks, "grid")


def cmd_sweep(args) -> int:
    try:
        scenarios = datasets.sweep(args.dims)
    except ValueError as exc:
        raise CliError(str(exc)) from None
    tasks = [(sc.name, sc.levels, args.seed, args.out, not args.no_calibrate, {"n_jobs": args.n_jobs}) for sc in scenarios]
    return _run_suite(args, tasks, "sweep")


def cmd_scale(args) -> int:
    if args.level is None and (args.n_jobs is None or args.horizon is None):
        raise CliError("give --level or both --n-jobs and --horizon")
    level = args.level if args.level is not None else (args.n_jobs, args.horizon)
    try:
        datasets.scale_config(level)
    except ValueError as exc:
        raise CliError(str(exc)) from None
    name = args.level or f"n{args.n_jobs}"
    tasks = [(name, {}, args.seed, args.out, not args.no_calibrate, {"scale": level})]
    return _run_suite(args, tasks, "scale")


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--format", choices=("text", "json"), default="text")
    common.add_argument("--seed", type=int, default=None)

    p = argparse.ArgumentParser(prog="shopstream", description="Calibrated dynamic job-shop instances.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("generate", parents=[common], help="generate an instance from a config")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_generate)

    s = sub.add_parser("calibrate", parents=[common], help="calibrate an instance toward its targets")
    s.add_argument("--instance", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--mode", choices=("sesc", "moo", "hybrid"), default="sesc")
    s.add_argument("--tol", type=float, default=0.05)
    s.add_argument("--max-iter", type=int, default=60)
    s.add_argument("--disable", action="append", default=[], choices=sesc.STRATEGIES)
    s.add_argument("--generations", type=int, default=40)
    s.add_argument("--population", type=int, default=None)
    s.add_argument("--pareto", help="write the Pareto archive here (moo/hybrid)")
    s.add_argument("--report")
    s.set_defaults(func=cmd_calibrate)

    s = sub.add_parser("metrics", parents=[common], help="observed metric vector")
    s.add_argument("--instance", required=True)
    s.add_argument("--trajectory")
    s.set_defaults(func=cmd_metrics)

    s = sub.add_parser("score", parents=[common], help="stress index of an instance")
    s.add_argument("--instance", required=True)
    s.set_defaults(func=cmd_score)

    s = sub.add_parser("simulate", parents=[common], help="run an agent on an instance")
    s.add_argument("--instance", required=True)
    s.add_argument("--agent", default="pdr:SPT+SPT")
    s.add_argument("--stdio", action="store_true", help="drive the episode over stdin/stdout")
    s.add_argument("--level", choices=("L1", "L2", "L3"), default="L1")
    s.add_argument("--out")
    s.add_argument("--gantt")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("evaluate", parents=[common], help="run an instance x agent matrix")
    s.add_argument("--matrix", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--trajectories")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("verify", parents=[common], help="check a trajectory")
    s.add_argument("--trajectory", required=True)
    s.add_argument("--instance", required=True)
    s.set_defaults(func=cmd_verify)

    s = sub.add_parser("subset", parents=[common], help="k-center subset selection")
    s.add_argument("--features", required=True)
    s.add_argument("-k", type=int, required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_subset)

    suite = argparse.ArgumentParser(add_help=False)
    suite.add_argument("--out", required=True)
    suite.add_argument("--jobs", type=int, default=1)
    suite.add_argument("--no-calibrate", action="store_true")

    s = sub.add_parser("grid", parents=[common, suite], help="factorial grid suite")
    s.add_argument("--levels", help="JSON file of level lists")
    s.add_argument("--level", action="append", help="NAME=v1,v2,... (repeatable)")
    s.add_argument("--only", action="store_true", help="use only the --level dimensions")
    s.add_argument("--seeds", type=int, default=datasets.GRID_SEEDS)
    s.add_argument("--n-jobs", type=int, default=datasets.DESK_JOBS)
    s.set_defaults(func=cmd_grid)

    s = sub.add_parser("sweep", parents=[common, suite], help="centroid-anchored sweeps")
    s.add_argument("--dims", nargs="*", default=[], choices=datasets.SWEEP_DIMENSIONS)
    s.add_argument("--n-jobs", type=int, default=datasets.DESK_JOBS)
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("scale", parents=[common, suite], help="fixed-count scale levels")
    s.add_argument("--level", choices=sorted(datasets.SCALE_LEVELS))
    s.add_argument("--n-jobs", type=int)
    s.add_argument("--horizon", type=float)
    s.set_defaults(func=cmd_scale)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "seed", None) is None and args.command in ("grid", "sweep", "scale"):
        args.seed = 0
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (SchemaError, SimulationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
