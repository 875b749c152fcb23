"""Trajectory verification, KPIs, experiment matrices, subset selection and
rank statistics."""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import IO, Iterable, Sequence

import numpy as np
from scipy import stats

from .agents import parse_agent
from .metrics import final_due_dates, merged_outages
from .model import SCHEMA_VERSION, EventKind, EventStream, RouteOp
from .sim import AppliedEvent, ExecRecord, Trajectory, simulate

TOL = 1e-9

FAULT_CLASSES = ("overlap", "precedence", "downtime", "duration", "cancelled", "eligibility", "release", "missing")


# ---------------------------------------------------------------------------
# Trajectory files
# ---------------------------------------------------------------------------


def trajectory_lines(traj: Trajectory) -> list[str]:
    header = {
        "schema_version": SCHEMA_VERSION,
        "kind": "trajectory",
        "agent": traj.agent,
        "instance": traj.instance,
        "makespan": traj.makespan,
        "complete": traj.complete,
        "warnings": list(traj.warnings),
        "events": [asdict(e) for e in traj.events],
    }
    lines = [json.dumps(header, sort_keys=True)]
    for r in traj.records:
        rec = asdict(r)
        rec["gaps"] = [list(g) for g in r.gaps]
        lines.append(json.dumps(rec, sort_keys=True))
    return lines


def write_trajectory(traj: Trajectory, dest: str | Path | IO[str]) -> None:
    text = "\n".join(trajectory_lines(traj)) + "\n"
    if hasattr(dest, "write"):
        dest.write(text)
    else:
        Path(dest).write_text(text)


def read_trajectory(src: str | Path | IO[str]) -> Trajectory:
    text = src.read() if hasattr(src, "read") else Path(src).read_text()
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise ValueError("empty trajectory file")
    try:
        header = json.loads(lines[0])
        if header.get("kind") != "trajectory":
            raise ValueError("first line is not a trajectory header")
        if header.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported schema_version {header.get('schema_version')!r}")
        records = []
        for n, line in enumerate(lines[1:], start=2):
            d = json.loads(line)
            d["gaps"] = tuple(tuple(g) for g in d.get("gaps", ()))
            try:
                records.append(ExecRecord(**d))
            except TypeError as exc:
                raise ValueError(f"line {n}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ValueError(f"malformed trajectory: {exc}") from None
    return Trajectory(
        records=tuple(records),
        events=tuple(AppliedEvent(**e) for e in header.get("events", [])),
        agent=header.get("agent", ""),
        instance=header.get("instance", ""),
        makespan=float(header.get("makespan", 0.0)),
        complete=bool(header.get("complete", True)),
        warnings=tuple(header.get("warnings", ())),
    )


def gantt(traj: Trajectory) -> dict:
    """Execution records keyed by machine, for external plotting."""
    out: dict[str, list] = {}
    for r in traj.records:
        out.setdefault(r.machine, []).append(
            {"job": r.job, "op": r.op, "start": r.start, "end": r.end, "gaps": [list(g) for g in r.gaps]}
        )
    return {"makespan": traj.makespan, "machines": dict(sorted(out.items()))}


# ---------------------------------------------------------------------------
# Verification
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Fault:
    kind: str
    message: str
    job: int | None = None
    op: int | None = None
    machine: str | None = None


@dataclass(frozen=True)
class VerificationReport:
    faults: tuple[Fault, ...]

    @property
    def ok(self) -> bool:
        return not self.faults

    def count(self, kind: str) -> int:
        return sum(1 for f in self.faults if f.kind == kind)

    def kinds(self) -> set[str]:
        return {f.kind for f in self.faults}

    def as_dict(self) -> dict:
        return {"ok": self.ok, "faults": [asdict(f) for f in self.faults]}


def _close(a: float, b: float) -> bool:
    return abs(a - b) <= TOL * max(1.0, abs(a), abs(b))


def expected_routes(stream: EventStream, traj: Trajectory) -> tuple[dict[int, tuple[RouteOp, ...]], set[int]]:
    """Replay scenario events against the executed records.

    An operation counts as started before an event at time t when it
    starts strictly before t, and as completed when it ends at or before t.
    Returns each job's final route and the set of cancelled jobs.
    """
    plant = stream.config.plant
    by_job: dict[int, list[ExecRecord]] = {}
    for r in traj.records:
        by_job.setdefault(r.job, []).append(r)
    routes: dict[int, tuple[RouteOp, ...]] = {}
    cancelled: set[int] = set()

    def started(j, t):
        return sum(1 for r in by_job.get(j, ()) if r.start < t)

    def completed(j, t):
        return sum(1 for r in by_job.get(j, ()) if r.end <= t)

    for e in stream.events:
        p = e.payload
        kind = e.kind
        if kind is EventKind.JOB_ARRIVAL:
            ops = plant.template_index[p.job.template].operations
            routes[p.job.job_id] = tuple(RouteOp(o.group, o.mean, float(x)) for o, x in zip(ops, p.job.processing))
        elif kind is EventKind.CANCELLATION and p.job_id in routes and p.job_id not in cancelled:
            cancelled.add(p.job_id)
            routes[p.job_id] = routes[p.job_id][: started(p.job_id, e.time)]
        elif kind is EventKind.REWORK and p.job_id in routes and p.job_id not in cancelled:
            route = routes[p.job_id]
            if 0 <= p.op_index < completed(p.job_id, e.time):
                k = started(p.job_id, e.time)
                routes[p.job_id] = route[:k] + (route[p.op_index],) + route[k:]
        elif kind is EventKind.ROUTE_CHANGE and p.job_id in routes and p.job_id not in cancelled:
            k = started(p.job_id, e.time)
            routes[p.job_id] = routes[p.job_id][:k] + tuple(p.operations[k:])
    return routes, cancelled


def verify(traj: Trajectory, stream: EventStream) -> VerificationReport:
    """Check a trajectory against the hard constraints of its instance."""
    plant = stream.config.plant
    speeds = plant.speeds
    machine_group = plant.machine_group
    faults: list[Fault] = []
    routes, cancelled = expected_routes(stream, traj)
    arrivals = {j.job_id: j.arrival for j in stream.jobs}

    by_job: dict[int, list[ExecRecord]] = {}
    for r in traj.records:
        if r.machine not in speeds:
            faults.append(Fault("eligibility", f"unknown machine {r.machine}", r.job, r.op, r.machine))
            continue
        by_job.setdefault(r.job, []).append(r)

    for j, recs in sorted(by_job.items()):
        if j not in routes:
            faults.append(Fault("missing", f"job {j} not in instance", j))
            continue
        route = routes[j]
        recs.sort(key=lambda r: r.op)
        seen = set()
        for r in recs:
            if r.op in seen:
                faults.append(Fault("precedence", f"job {j} op {r.op} executed twice", j, r.op, r.machine))
                continue
            seen.add(r.op)
            if r.op >= len(route) or r.op < 0:
                kind = "cancelled" if j in cancelled else "precedence"
                faults.append(Fault(kind, f"job {j} op {r.op} not in its route", j, r.op, r.machine))
                continue
            op = route[r.op]
            if machine_group[r.machine] != op.group:
                faults.append(Fault("eligibility", f"job {j} op {r.op} on {r.machine} outside group {op.group}", j, r.op, r.machine))
            if not _close(r.processing, op.processing):
                faults.append(Fault("duration", f"job {j} op {r.op} processing {r.processing:g} != {op.processing:g}", j, r.op, r.machine))
            if r.start < arrivals.get(j, 0.0) - TOL:
                faults.append(Fault("release", f"job {j} op {r.op} starts before arrival", j, r.op, r.machine))
        by_op = {r.op: r for r in recs}
        for k in sorted(by_op):
            if k == 0:
                continue
            prev = by_op.get(k - 1)
            cur = by_op[k]
            if prev is None:
                faults.append(Fault("precedence", f"job {j} op {k} executed without op {k - 1}", j, k, cur.machine))
            elif cur.start < prev.end - TOL * max(1.0, prev.end):
                faults.append(Fault("precedence", f"job {j} op {k} starts before op {k - 1} ends", j, k, cur.machine))
    if traj.complete:
        for j, route in sorted(routes.items()):
            done = {r.op for r in by_job.get(j, ())}
            for k in range(len(route)):
                if k not in done:
                    faults.append(Fault("missing", f"job {j} op {k} never executed", j, k))

    downs = merged_outages(stream)
    by_machine: dict[str, list[ExecRecord]] = {}
    for r in traj.records:
        if r.machine in speeds:
            by_machine.setdefault(r.machine, []).append(r)
    for m, recs in sorted(by_machine.items()):
        recs.sort(key=lambda r: (r.start, r.end))
        for a, b in zip(recs, recs[1:]):
            if b.start < a.end - TOL * max(1.0, a.end):
                faults.append(Fault("overlap", f"{m}: job {a.job} op {a.op} overlaps job {b.job} op {b.op}", b.job, b.op, m))
        iv = downs.get(m, [])
        for r in recs:
            expect = r.processing / speeds[m] + sum(e - s for s, e in r.gaps)
            if not _close(r.end - r.start, expect) or not _close(r.duration, r.processing / speeds[m]):
                faults.append(Fault("duration", f"{m}: job {r.job} op {r.op} lasts {r.end - r.start:g}, expected {expect:g}", r.job, r.op, m))
            if _active_downtime(r, iv) > TOL * max(1.0, r.end):
                faults.append(Fault("downtime", f"{m}: job {r.job} op {r.op} runs during downtime", r.job, r.op, m))
    return VerificationReport(tuple(faults))


def _active_downtime(r: ExecRecord, downs) -> float:
    """Downtime overlapping the record's active (non-gap) time."""
    total = 0.0
    cursor = r.start
    pieces = []
    for s, e in sorted(r.gaps):
        if s > cursor:
            pieces.append((cursor, s))
        cursor = max(cursor, e)
    if r.end > cursor:
        pieces.append((cursor, r.end))
    for a, b in pieces:
        for s, e in downs:
            total += max(0.0, min(b, e) - max(a, s))
    return total


# ---------------------------------------------------------------------------
# KPIs
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Kpis:
    makespan: float
    mean_tardiness: float
    tardy_jobs: int
    complete: bool


def kpis(traj: Trajectory, stream: EventStream) -> Kpis:
    """Makespan and mean tardiness over jobs that were never cancelled."""
    due = final_due_dates(stream)
    gone = {e.payload.job_id for e in stream.events if e.kind is EventKind.CANCELLATION}
    completion: dict[int, float] = {}
    for r in traj.records:
        completion[r.job] = max(completion.get(r.job, 0.0), r.end)
    tard = [max(0.0, completion[j] - due[j]) for j in due if j not in gone and j in completion]
    missing = any(j not in completion for j in due if j not in gone)
    return Kpis(
        makespan=max(completion.values(), default=0.0),
        mean_tardiness=float(np.mean(tard)) if tard else 0.0,
        tardy_jobs=sum(1 for t in tard if t > 0),
        complete=traj.complete and not missing,
    )


def relative_gap(c: float, c_best: float) -> float:
    """Percent excess of ``c`` over ``c_best``."""
    if c_best <= 0:
        raise ValueError("best makespan must be positive")
    return (c - c_best) / c_best * 100.0


# ---------------------------------------------------------------------------
# Experiment matrix
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Cell:
    instance: str
    agent: str
    seed: int
    makespan: float | None
    mean_tardiness: float | None
    ok: bool
    fault: str = ""
    runtime: float = field(default=0.0, compare=False)


@dataclass(frozen=True)
class ExperimentMatrix:
    instances: tuple[str, ...]
    agents: tuple[str, ...]
    seeds: tuple[int, ...]
    cells: tuple[Cell, ...]

    def makespans(self) -> np.ndarray:
        """Array ``[instance, agent, seed]``; NaN for failed cells."""
        arr = np.full((len(self.instances), len(self.agents), len(self.seeds)), np.nan)
        ii = {n: i for i, n in enumerate(self.instances)}
        ai = {n: i for i, n in enumerate(self.agents)}
        si = {s: i for i, s in enumerate(self.seeds)}
        for c in self.cells:
            if c.ok and c.makespan is not None:
                arr[ii[c.instance], ai[c.agent], si[c.seed]] = c.makespan
        return arr

    def best(self) -> dict[str, float]:
        arr = self.makespans()
        return {n: float(np.nanmin(arr[i])) for i, n in enumerate(self.instances) if np.isfinite(arr[i]).any()}

    def gaps(self) -> np.ndarray:
        arr = self.makespans()
        best = np.nanmin(arr.reshape(arr.shape[0], -1), axis=1)
        return (arr - best[:, None, None]) / best[:, None, None] * 100.0

    def as_dict(self, timing: bool = False) -> dict:
        cells = []
        for c in self.cells:
            d = asdict(c)
            if not timing:
                d.pop("runtime")
            cells.append(d)
        return {
            "schema_version": SCHEMA_VERSION,
            "kind": "matrix",
            "instances": list(self.instances),
            "agents": list(self.agents),
            "seeds": list(self.seeds),
            "best": self.best(),
            "cells": cells,
        }

    def export(self) -> str:
        return json.dumps(self.as_dict(), sort_keys=True, indent=1)


def _seeded(agent: str, seed: int) -> str:
    if agent.startswith("random") and "seed=" not in agent:
        return f"random:seed={seed}"
    return agent


def run_matrix(
    instances: Sequence[tuple[str, EventStream]],
    agents: Sequence[str],
    seeds: Sequence[int] = (0,),
    out_dir: str | Path | None = None,
) -> ExperimentMatrix:
    """Simulate and verify every (instance, agent, seed) cell.

    A random agent without an explicit seed is seeded by the cell seed;
    rules are deterministic. Cells that fail verification are kept with
    their fault and excluded from the best column.
    """
    if not instances or not agents or not seeds:
        raise ValueError("instances, agents and seeds must be nonempty")
    cells = []
    for name, stream in instances:
        for agent_text in agents:
            for seed in seeds:
                agent = parse_agent(_seeded(agent_text, seed))
                t0 = time.perf_counter()
                try:
                    traj = simulate(stream, agent, instance=name)
                except Exception as exc:  # recorded as a cell fault
                    cells.append(Cell(name, agent_text, seed, None, None, False, f"simulation: {exc}"))
                    continue
                runtime = time.perf_counter() - t0
                report = verify(traj, stream)
                k = kpis(traj, stream)
                fault = "" if report.ok else "; ".join(sorted(report.kinds()))
                if out_dir is not None:
                    path = Path(out_dir) / name / f"{agent_text.replace(':', '_').replace('+', '-')}_s{seed}.jsonl"
                    path.parent.mkdir(parents=True, exist_ok=True)
                    write_trajectory(traj, path)
                cells.append(
                    Cell(name, agent_text, seed, k.makespan, k.mean_tardiness, report.ok and k.complete, fault, runtime)
                )
    return ExperimentMatrix(
        tuple(n for n, _ in instances), tuple(agents), tuple(int(s) for s in seeds), tuple(cells)
    )


# ---------------------------------------------------------------------------
# Subset selection
# ---------------------------------------------------------------------------


def zscore(X) -> np.ndarray:
    """Column z-scores; constant columns use unit scale."""
    X = np.asarray(X, float)
    mu = X.mean(axis=0)
    sd = X.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    return (X - mu) / sd


def percentile_rank(values, groups=None) -> np.ndarray:
    """Percentile rank in (0, 1], computed within each group."""
    values = np.asarray(values, float)
    out = np.empty_like(values)
    groups = np.zeros(values.size, int) if groups is None else np.asarray(groups)
    for g in np.unique(groups):
        idx = np.flatnonzero(groups == g)
        out[idx] = stats.rankdata(values[idx], method="average") / idx.size
    return out


def kcenter_subset(features, k: int, difficulty=None) -> list[int]:
    """Greedy farthest-point selection on z-scored features.

    The first center is the most difficult instance (``difficulty``
    defaults to the last feature column). Ties go to the lowest index.
    """
    X = np.asarray(features, float)
    if X.ndim == 1:
        X = X[:, None]
    n = X.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k={k} must lie in [1, {n}]")
    d = X[:, -1] if difficulty is None else np.asarray(difficulty, float)
    Z = zscore(X)
    first = int(np.flatnonzero(d == d.max())[0])
    chosen = [first]
    dist = np.linalg.norm(Z - Z[first], axis=1)
    while len(chosen) < k:
        dist_masked = dist.copy()
        dist_masked[chosen] = -np.inf
        nxt = int(np.argmax(dist_masked))
        chosen.append(nxt)
        dist = np.minimum(dist, np.linalg.norm(Z - Z[nxt], axis=1))
    return chosen


def coverage_radius(features, centers) -> float:
    Z = zscore(features)
    if Z.ndim == 1:
        Z = Z[:, None]
    D = np.linalg.norm(Z[:, None, :] - Z[None, list(centers), :], axis=2)
    return float(D.min(axis=1).max())


# ---------------------------------------------------------------------------
# Statistics
# ---------------------------------------------------------------------------


def spearman(x, y, permutations: int = 10_000, seed: int = 0) -> tuple[float, float]:
    """Spearman correlation with a two-sided permutation p-value."""
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    if x.shape != y.shape:
        raise ValueError("x and y differ in length")
    if x.size < 3:
        raise ValueError("need at least three pairs")
    rx = stats.rankdata(x) - (x.size + 1) / 2.0
    ry = stats.rankdata(y) - (y.size + 1) / 2.0
    denom = np.sqrt((rx @ rx) * (ry @ ry))
    if denom == 0:
        return 0.0, 1.0
    rho = float(rx @ ry / denom)
    rng = np.random.default_rng(seed)
    hits = 0
    done = 0
    while done < permutations:
        b = min(2000, permutations - done)
        perm = rng.permuted(np.broadcast_to(ry, (b, ry.size)), axis=1)
        r = perm @ rx / denom
        hits += int(np.sum(np.abs(r) >= abs(rho) - 1e-12))
        done += b
    return rho, (hits + 1) / (permutations + 1)


def bootstrap_mean_diff(a, b, B: int = 10_000, seed: int = 0, level: float = 0.95) -> tuple[float, tuple[float, float]]:
    """Percentile bootstrap of ``mean(a) - mean(b)``."""
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    if a.size == 0 or b.size == 0:
        raise ValueError("samples must be nonempty")
    rng = np.random.default_rng(seed)
    ma = a[rng.integers(a.size, size=(B, a.size))].mean(axis=1)
    mb = b[rng.integers(b.size, size=(B, b.size))].mean(axis=1)
    diffs = ma - mb
    alpha = (1 - level) / 2
    lo, hi = np.quantile(diffs, [alpha, 1 - alpha])
    return float(a.mean() - b.mean()), (float(lo), float(hi))


def ks_statistic(a, b) -> float:
    """Two-sample Kolmogorov-Smirnov distance."""
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    if a.size == 0 or b.size == 0:
        raise ValueError("samples must be nonempty")
    return float(stats.ks_2samp(a, b).statistic)


def scheduling_gap(stream: EventStream, random_seed: int = 0, rules: Iterable[str] | None = None) -> dict:
    """Makespan of a random agent minus the best rule's makespan."""
    from .agents import all_rules

    names = list(rules) if rules is not None else [f"pdr:{r.name}" for r in all_rules()]
    best = min(simulate(stream, parse_agent(n)).makespan for n in names)
    rnd = simulate(stream, parse_agent(f"random:seed={random_seed}")).makespan
    return {"random": rnd, "best": best, "gap": rnd - best}
