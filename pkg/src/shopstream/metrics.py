"""Observed metric vector of a realized event stream."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from itertools import chain

import numpy as np

from .model import EventKind, EventStream, PlantSpec

# Order of the calibrated metric vector.
METRIC_KEYS = ("rho_global", "c_a2", "c_p2", "tau", "chi_load", "delta", "eps_bn")


@dataclass(frozen=True)
class ObservedMetrics:
    rho_global: float
    rho_groups: dict[str, float]
    chi_load: float
    rho_windows: tuple[float, ...]
    eps_bn: float
    c_a2: float
    c_p2: float
    tau: float
    delta: float
    n_jobs: int
    mean_interarrival: float
    std_interarrival: float
    mean_processing: float
    std_processing: float
    mean_route_length: float
    n_machines: int
    attribution: str = "nominal"
    flags: tuple[str, ...] = field(default_factory=tuple)

    def vector(self) -> np.ndarray:
        return np.array([getattr(self, k) for k in METRIC_KEYS], dtype=float)

    def as_dict(self) -> dict:
        return {
            "rho_global": self.rho_global,
            "rho_groups": dict(sorted(self.rho_groups.items())),
            "chi_load": self.chi_load,
            "rho_windows": list(self.rho_windows),
            "eps_bn": self.eps_bn,
            "c_a2": self.c_a2,
            "c_p2": self.c_p2,
            "tau": self.tau,
            "delta": self.delta,
            "n_jobs": self.n_jobs,
            "mean_interarrival": self.mean_interarrival,
            "std_interarrival": self.std_interarrival,
            "mean_processing": self.mean_processing,
            "std_processing": self.std_processing,
            "mean_route_length": self.mean_route_length,
            "n_machines": self.n_machines,
            "attribution": self.attribution,
            "flags": list(self.flags),
        }

    @classmethod
    def from_dict(cls, data: dict) -> ObservedMetrics:
        data = dict(data)
        data["rho_windows"] = tuple(data.get("rho_windows", ()))
        data["flags"] = tuple(data.get("flags", ()))
        return cls(**data)


def merge_downtimes(intervals) -> list[tuple[float, float]]:
    """Union of intervals as a sorted list of disjoint intervals."""
    merged: list[list[float]] = []
    for s, e in sorted(intervals):
        if merged and s <= merged[-1][1]:
            if e > merged[-1][1]:
                merged[-1][1] = e
        else:
            merged.append([s, e])
    return [(s, e) for s, e in merged]


def merged_outages(stream: EventStream) -> dict[str, list[tuple[float, float]]]:
    """Disjoint downtime intervals per machine, clipped to ``[0, H]``."""
    raw: dict[str, list[tuple[float, float]]] = {}
    H = stream.horizon
    for o in stream.outages:
        s, e = max(o.start, 0.0), min(o.end, H)
        if e > s:
            raw.setdefault(o.machine, []).append((s, e))
    return {m: merge_downtimes(iv) for m, iv in raw.items()}


def overlap(intervals, start: float, end: float) -> float:
    return sum(max(0.0, min(e, end) - max(s, start)) for s, e in intervals)


def scv(values) -> float:
    """Squared coefficient of variation with population variance."""
    arr = np.asarray(values, dtype=float)
    if arr.size == 0:
        return 0.0
    mean = arr.mean()
    if mean == 0:
        return 0.0
    return float(arr.var() / (mean * mean))


def coefficient_of_variation(values) -> float:
    arr = np.asarray(values, dtype=float)
    mean = arr.mean() if arr.size else 0.0
    if mean == 0:
        return 0.0
    return float(arr.std() / mean)


@lru_cache(maxsize=64)
def _op_groups(plant: PlantSpec) -> tuple[tuple[str, ...], dict[str, np.ndarray]]:
    group_ids = tuple(g.id for g in plant.groups)
    pos = {g: i for i, g in enumerate(group_ids)}
    per_template = {t.id: np.array([pos[op.group] for op in t.operations], dtype=np.intp) for t in plant.templates}
    return group_ids, per_template


def final_due_dates(stream: EventStream) -> dict[int, float]:
    due = {job.job_id: job.due for job in stream.jobs}
    for e in stream.events:
        if e.payload.kind is EventKind.DUE_DATE_CHANGE and e.payload.job_id in due:
            due[e.payload.job_id] = e.payload.due
    return due


def observed_metrics(stream: EventStream, trajectory=None) -> ObservedMetrics:
    """Compute the observed metric vector.

    Without a trajectory, workload is attributed nominally: each realized
    operation counts toward its eligible group, and a bottleneck window
    receives the work of jobs arriving inside it. With a trajectory (any
    object exposing ``records`` with ``machine``, ``start``, ``end`` and
    ``processing``), executed intervals are used and window workload is
    prorated by the overlap of each execution interval with the window.
    """
    jobs = stream.jobs
    if not jobs and not stream.events:
        raise ValueError("empty stream")
    cfg = stream.config
    plant = cfg.plant
    H = stream.horizon
    speeds = plant.speeds
    total_speed = plant.total_speed
    flags: list[str] = []
    group_ids, tpl_groups = _op_groups(plant)
    group_speed = np.array([plant.group_speed[g] for g in group_ids])

    n = len(jobs)
    arrivals = np.fromiter((j.arrival for j in jobs), float, count=n)
    lengths = np.fromiter((len(j.processing) for j in jobs), np.intp, count=n)
    flat_p = np.fromiter(chain.from_iterable(j.processing for j in jobs), float, count=int(lengths.sum()))
    works = np.add.reduceat(flat_p, np.r_[0, np.cumsum(lengths)[:-1]]) if n else np.zeros(0)

    if trajectory is None:
        attribution = "nominal"
        gidx = np.concatenate([tpl_groups[j.template] for j in jobs]) if n else np.zeros(0, np.intp)
        W_g = np.bincount(gidx, weights=flat_p, minlength=len(group_ids))
        exec_p = flat_p
    else:
        attribution = "trajectory"
        machine_group = plant.machine_group
        pos = {g: i for i, g in enumerate(group_ids)}
        W_g = np.zeros(len(group_ids))
        exec_list = []
        for r in trajectory.records:
            W_g[pos[machine_group[r.machine]]] += r.processing
            exec_list.append(r.processing)
        exec_p = np.asarray(exec_list, float)

    rho_global = float(W_g.sum() / (H * total_speed))
    rho_g = W_g / (H * group_speed)
    chi = coefficient_of_variation(rho_g)

    if n >= 2:
        gaps = np.diff(arrivals)
        c_a2 = scv(gaps)
        mu_dt, sd_dt = float(gaps.mean()), float(gaps.std())
    else:
        c_a2, mu_dt, sd_dt = 0.0, 0.0, 0.0
        flags.append("fewer than two arrivals: c_a2 reported as 0")

    c_p2 = scv(exec_p)
    mu_p = float(exec_p.mean()) if exec_p.size else 0.0
    sd_p = float(exec_p.std()) if exec_p.size else 0.0

    due = final_due_dates(stream)
    if n:
        dues = np.fromiter((due[j.job_id] for j in jobs), float, count=n)
        safe = np.where(works > 0, works, np.inf)
        tau = float(np.mean((dues - arrivals) / safe))
    else:
        tau = 0.0

    downs = merged_outages(stream)
    lost = sum(speeds[m] * sum(e - s for s, e in iv) for m, iv in downs.items())
    delta = lost / (H * total_speed)

    rho_windows = []
    for b in cfg.targets.bottlenecks:
        members = plant.group_machines[b.group]
        span = b.end - b.start
        c_eff = sum(speeds[m] * (span - overlap(downs.get(m, ()), b.start, b.end)) for m in members)
        if trajectory is None:
            gi = group_ids.index(b.group)
            inside = (arrivals >= b.start) & (arrivals <= b.end)
            w_win = 0.0
            for j in np.flatnonzero(inside):
                job = jobs[j]
                w_win += sum(p for p, g in zip(job.processing, tpl_groups[job.template]) if g == gi)
        else:
            member_set = set(members)
            w_win = 0.0
            for r in trajectory.records:
                if r.machine in member_set and r.end > r.start:
                    frac = max(0.0, min(r.end, b.end) - max(r.start, b.start)) / (r.end - r.start)
                    w_win += frac * r.processing
        if c_eff > 1e-12:
            rho_windows.append(w_win / c_eff)
        else:
            rho_windows.append(0.0 if w_win == 0 else 1e6)
            flags.append("bottleneck window with no effective capacity")
    if rho_windows:
        targets = np.array([b.rho for b in cfg.targets.bottlenecks])
        eps_bn = float(np.sqrt(np.mean((np.asarray(rho_windows) - targets) ** 2)))
    else:
        eps_bn = 0.0

    return ObservedMetrics(
        rho_global=rho_global,
        rho_groups={g: float(r) for g, r in zip(group_ids, rho_g)},
        chi_load=chi,
        rho_windows=tuple(float(r) for r in rho_windows),
        eps_bn=eps_bn,
        c_a2=c_a2,
        c_p2=c_p2,
        tau=tau,
        delta=float(delta),
        n_jobs=n,
        mean_interarrival=mu_dt,
        std_interarrival=sd_dt,
        mean_processing=mu_p,
        std_processing=sd_p,
        mean_route_length=float(lengths.mean()) if n else 0.0,
        n_machines=len(plant.machines),
        attribution=attribution,
        flags=tuple(flags),
    )
