"""Domain types, configuration validation and deterministic seeding."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from functools import cached_property, lru_cache
from typing import Union

import numpy as np

SCHEMA_VERSION = 1

PROFILES = ("constant", "periodic", "linear")

STREAM_NAMES = (
    "arrivals",
    "processing",
    "batch",
    "disturbance",
    "scenario",
    "calibrator",
    "moo",
    "agent",
)


# ---------------------------------------------------------------------------
# Plant structure
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Machine:
    id: str
    speed: float = 1.0


@dataclass(frozen=True)
class MachineGroup:
    id: str
    machines: tuple[str, ...]


@dataclass(frozen=True)
class TemplateOp:
    id: str
    group: str
    mean: float


@dataclass(frozen=True)
class ProcessTemplate:
    id: str
    operations: tuple[TemplateOp, ...]

    @property
    def mean_work(self) -> float:
        return sum(op.mean for op in self.operations)


@dataclass(frozen=True)
class PlantSpec:
    machines: tuple[Machine, ...]
    groups: tuple[MachineGroup, ...]
    templates: tuple[ProcessTemplate, ...]
    job_mix: tuple[float, ...]

    @cached_property
    def speeds(self) -> dict[str, float]:
        return {m.id: m.speed for m in self.machines}

    @cached_property
    def machine_group(self) -> dict[str, str]:
        return {mid: g.id for g in self.groups for mid in g.machines}

    @cached_property
    def group_machines(self) -> dict[str, tuple[str, ...]]:
        return {g.id: g.machines for g in self.groups}

    @cached_property
    def group_speed(self) -> dict[str, float]:
        speeds = self.speeds
        return {g.id: sum(speeds[m] for m in g.machines) for g in self.groups}

    @cached_property
    def template_index(self) -> dict[str, ProcessTemplate]:
        return {t.id: t for t in self.templates}

    @property
    def total_speed(self) -> float:
        return sum(m.speed for m in self.machines)

    def mean_work(self) -> float:
        """Expected work per job under the job mix."""
        return sum(w * t.mean_work for w, t in zip(self.job_mix, self.templates))


# ---------------------------------------------------------------------------
# Distributions, targets, dynamics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BottleneckSpec:
    start: float
    end: float
    group: str
    rho: float


@dataclass(frozen=True)
class TargetMetrics:
    rho_global: float
    c_a2: float
    c_p2: float
    tau: float
    chi_load: float = 0.0
    delta: float = 0.0
    bottlenecks: tuple[BottleneckSpec, ...] = ()


@dataclass(frozen=True)
class DistributionParams:
    """Parametric families of the stochastic primitives.

    Gamma shape/scale fields left as ``None`` are derived from the targets
    (shape ``1/c2``; arrival scale from the base rate; processing scale from
    each operation's nominal mean).
    """

    arrival_shape: float | None = None
    arrival_scale: float | None = None
    processing_shape: float | None = None
    pm_mean: float = 10.0
    pm_std: float = 2.0
    batch_mean: float = 3.0
    batch_std: float = 1.0
    profile: str = "constant"
    amplitude: float = 0.0
    period: float = 1.0
    repair_mean: float = 30.0
    initial_wip: int = 0


@dataclass(frozen=True)
class DynamicScenario:
    p_cancel: float = 0.0
    p_rework: float = 0.0
    p_prio: float = 0.0
    p_route: float = 0.0
    p_dd_chg: float = 0.0
    p_batch: float = 0.0
    p_ptime: float = 0.0
    pm_interval: float | None = None
    ptime_multipliers: tuple[float, ...] = (0.7, 0.9, 1.2, 1.5)
    due_tightening: float = 0.5


@dataclass(frozen=True)
class InputConfig:
    plant: PlantSpec
    distri: DistributionParams
    targets: TargetMetrics
    dyn: DynamicScenario
    horizon: float
    n_jobs_fixed: int | None = None
    seed: int = 0

    def with_targets(self, **changes) -> InputConfig:
        return replace(self, targets=replace(self.targets, **changes))


# ---------------------------------------------------------------------------
# Events
# ---------------------------------------------------------------------------


class EventKind(str, Enum):
    MACHINE_UP = "MachineUp"
    MACHINE_DOWN = "MachineDown"
    PREVENTIVE_MAINTENANCE = "PreventiveMaintenance"
    JOB_ARRIVAL = "JobArrival"
    CANCELLATION = "Cancellation"
    REWORK = "Rework"
    PRIORITY_CHANGE = "PriorityChange"
    ROUTE_CHANGE = "RouteChange"
    DUE_DATE_CHANGE = "DueDateChange"


# Tie-break order at equal timestamps.
KIND_RANK = {kind: rank for rank, kind in enumerate(EventKind)}


@dataclass(frozen=True)
class JobSpec:
    job_id: int
    arrival: float
    template: str
    processing: tuple[float, ...]
    due: float
    batch: int = 0
    priority: int = 0

    @property
    def work(self) -> float:
        return sum(self.processing)


@dataclass(frozen=True)
class RouteOp:
    group: str
    mean: float
    processing: float


@dataclass(frozen=True)
class JobArrival:
    job: JobSpec
    kind = EventKind.JOB_ARRIVAL


@dataclass(frozen=True)
class MachineDown:
    machine: str
    duration: float
    kind = EventKind.MACHINE_DOWN


@dataclass(frozen=True)
class MachineUp:
    machine: str
    kind = EventKind.MACHINE_UP


@dataclass(frozen=True)
class PreventiveMaintenance:
    machine: str
    duration: float
    kind = EventKind.PREVENTIVE_MAINTENANCE


@dataclass(frozen=True)
class Cancellation:
    job_id: int
    kind = EventKind.CANCELLATION


@dataclass(frozen=True)
class Rework:
    job_id: int
    op_index: int
    kind = EventKind.REWORK


@dataclass(frozen=True)
class PriorityChange:
    job_id: int
    priority: int
    kind = EventKind.PRIORITY_CHANGE


@dataclass(frozen=True)
class RouteChange:
    job_id: int
    template: str
    operations: tuple[RouteOp, ...]
    kind = EventKind.ROUTE_CHANGE


@dataclass(frozen=True)
class DueDateChange:
    job_id: int
    due: float
    kind = EventKind.DUE_DATE_CHANGE


Payload = Union[
    JobArrival,
    MachineDown,
    MachineUp,
    PreventiveMaintenance,
    Cancellation,
    Rework,
    PriorityChange,
    RouteChange,
    DueDateChange,
]

PAYLOAD_TYPES: dict[EventKind, type] = {
    cls.kind: cls
    for cls in (
        JobArrival,
        MachineDown,
        MachineUp,
        PreventiveMaintenance,
        Cancellation,
        Rework,
        PriorityChange,
        RouteChange,
        DueDateChange,
    )
}

SCENARIO_KINDS = frozenset(
    {
        EventKind.CANCELLATION,
        EventKind.REWORK,
        EventKind.PRIORITY_CHANGE,
        EventKind.ROUTE_CHANGE,
        EventKind.DUE_DATE_CHANGE,
    }
)


@dataclass(frozen=True)
class Event:
    time: float
    eid: int
    payload: Payload

    @property
    def kind(self) -> EventKind:
        return self.payload.kind


@dataclass(frozen=True)
class Outage:
    """Unavailability interval extracted from a Down or PM event."""

    machine: str
    start: float
    end: float
    pm: bool = False

    @property
    def duration(self) -> float:
        return self.end - self.start


@dataclass(frozen=True)
class EventStream:
    events: tuple[Event, ...]
    horizon: float
    config: InputConfig

    @classmethod
    def build(cls, payloads, horizon: float, config: InputConfig) -> EventStream:
        """Normalize ``(time, payload)`` pairs into a canonical stream.

        MachineUp markers are regenerated from the Down events, events are
        sorted by (time, kind rank, input order) and event ids renumbered.
        """
        items = []
        for seq, (time, payload) in enumerate(payloads):
            if payload.kind is EventKind.MACHINE_UP:
                continue
            items.append((float(time), KIND_RANK[payload.kind], seq, payload))
            if payload.kind is EventKind.MACHINE_DOWN:
                up_time = float(time) + payload.duration
                items.append((up_time, KIND_RANK[EventKind.MACHINE_UP], seq, MachineUp(payload.machine)))
        # seq is unique, so payloads are never compared.
        items.sort()
        events = tuple(Event(time, eid, payload) for eid, (time, _, _, payload) in enumerate(items))
        return cls(events, float(horizon), config)

    def pairs(self) -> list[tuple[float, Payload]]:
        return [(e.time, e.payload) for e in self.events]

    def rebuild(self, payloads) -> EventStream:
        return EventStream.build(payloads, self.horizon, self.config)

    @cached_property
    def jobs(self) -> tuple[JobSpec, ...]:
        return tuple(e.payload.job for e in self.events if e.payload.kind is EventKind.JOB_ARRIVAL)

    @cached_property
    def outages(self) -> tuple[Outage, ...]:
        out = []
        for e in self.events:
            kind = e.payload.kind
            if kind is EventKind.MACHINE_DOWN or kind is EventKind.PREVENTIVE_MAINTENANCE:
                out.append(
                    Outage(
                        e.payload.machine,
                        e.time,
                        e.time + e.payload.duration,
                        pm=kind is EventKind.PREVENTIVE_MAINTENANCE,
                    )
                )
        return tuple(out)

    def count(self, kind: EventKind) -> int:
        return sum(1 for e in self.events if e.payload.kind is kind)


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Violation:
    path: str
    message: str

    def __str__(self) -> str:
        return f"{self.path}: {self.message}"


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple[Violation, ...] = field(default_factory=tuple)

    @property
    def ok(self) -> bool:
        return not self.violations

    def messages(self) -> list[str]:
        return [str(v) for v in self.violations]


def _prob(value: float, path: str, out: list[Violation]) -> None:
    if not (0.0 <= value <= 1.0):
        out.append(Violation(path, f"{path.rsplit('.', 1)[-1]} {value:g} not in [0,1]"))


def validate_config(cfg: InputConfig) -> ValidationReport:
    """Collect every violated invariant of ``cfg``; never raises."""
    out: list[Violation] = []
    plant = cfg.plant

    machine_ids = [m.id for m in plant.machines]
    if not machine_ids:
        out.append(Violation("plant.machines", "no machines"))
    if len(set(machine_ids)) != len(machine_ids):
        out.append(Violation("plant.machines", "duplicate machine ids"))
    for i, m in enumerate(plant.machines):
        if not (m.speed > 0 and math.isfinite(m.speed)):
            out.append(Violation(f"plant.machines[{i}].speed", f"speed {m.speed:g} must be > 0"))

    grouped = [mid for g in plant.groups for mid in g.machines]
    group_ids = [g.id for g in plant.groups]
    if len(set(group_ids)) != len(group_ids):
        out.append(Violation("plant.groups", "duplicate group ids"))
    if sorted(grouped) != sorted(set(machine_ids)) or len(grouped) != len(set(grouped)):
        out.append(Violation("plant.groups", "groups do not partition the machine set"))
    for i, g in enumerate(plant.groups):
        if not g.machines:
            out.append(Violation(f"plant.groups[{i}]", f"group {g.id} is empty"))

    if not plant.templates:
        out.append(Violation("plant.templates", "no templates"))
    for i, t in enumerate(plant.templates):
        if not t.operations:
            out.append(Violation(f"plant.templates[{i}].operations", "empty operation list"))
        for j, op in enumerate(t.operations):
            if op.group not in group_ids:
                out.append(Violation(f"plant.templates[{i}].operations[{j}].group", f"unknown group {op.group}"))
            if not (op.mean > 0):
                out.append(Violation(f"plant.templates[{i}].operations[{j}].mean", f"mean {op.mean:g} must be > 0"))

    if len(plant.job_mix) != len(plant.templates):
        out.append(Violation("plant.job_mix", "job_mix length differs from template count"))
    if any(w < 0 for w in plant.job_mix):
        out.append(Violation("plant.job_mix", "negative job_mix entry"))
    total = sum(plant.job_mix)
    if abs(total - 1.0) > 1e-9:
        out.append(Violation("plant.job_mix", f"job_mix sums to {total:.12g}"))

    d = cfg.distri
    for name in ("arrival_shape", "arrival_scale", "processing_shape"):
        value = getattr(d, name)
        if value is not None and not value > 0:
            out.append(Violation(f"distri.{name}", f"{name} {value:g} must be > 0"))
    if d.profile not in PROFILES:
        out.append(Violation("distri.profile", f"unknown profile {d.profile!r}"))
    _prob(d.amplitude, "distri.amplitude", out)
    if not d.period > 0:
        out.append(Violation("distri.period", f"period {d.period:g} must be > 0"))
    if d.pm_std < 0 or d.batch_std < 0:
        out.append(Violation("distri", "standard deviations must be >= 0"))
    if not d.repair_mean > 0:
        out.append(Violation("distri.repair_mean", "repair_mean must be > 0"))
    if d.initial_wip < 0:
        out.append(Violation("distri.initial_wip", "initial_wip must be >= 0"))

    t = cfg.targets
    if not (0.0 < t.rho_global < 1.0):
        out.append(Violation("targets.rho_global", f"rho_global {t.rho_global:g} out of (0,1)"))
    if not (0.0 <= t.delta < 1.0):
        out.append(Violation("targets.delta", f"delta {t.delta:g} out of [0,1)"))
    if not t.tau > 0:
        out.append(Violation("targets.tau", f"tau {t.tau:g} must be > 0"))
    for name in ("c_a2", "c_p2", "chi_load"):
        if getattr(t, name) < 0:
            out.append(Violation(f"targets.{name}", f"{name} must be >= 0"))
    for i, b in enumerate(t.bottlenecks):
        path = f"targets.bottlenecks[{i}]"
        if not (0 <= b.start < b.end <= cfg.horizon):
            out.append(Violation(path, f"window [{b.start:g}, {b.end:g}] not inside [0, H]"))
        if b.group not in group_ids:
            out.append(Violation(f"{path}.group", f"unknown group {b.group}"))
        if not (0.0 < b.rho < 1.0):
            out.append(Violation(f"{path}.rho", f"rho {b.rho:g} out of (0,1)"))

    dyn = cfg.dyn
    for name in ("p_cancel", "p_rework", "p_prio", "p_route", "p_dd_chg", "p_batch", "p_ptime"):
        _prob(getattr(dyn, name), f"dyn.{name}", out)
    if dyn.pm_interval is not None and not dyn.pm_interval > 0:
        out.append(Violation("dyn.pm_interval", "pm_interval must be > 0 or null"))
    if any(m <= 0 for m in dyn.ptime_multipliers):
        out.append(Violation("dyn.ptime_multipliers", "multipliers must be > 0"))
    if dyn.p_ptime > 0 and not dyn.ptime_multipliers:
        out.append(Violation("dyn.ptime_multipliers", "p_ptime > 0 requires multipliers"))
    _prob(dyn.due_tightening, "dyn.due_tightening", out)

    if not (cfg.horizon > 0 and math.isfinite(cfg.horizon)):
        out.append(Violation("horizon", f"horizon {cfg.horizon:g} must be > 0"))
    if cfg.n_jobs_fixed is not None and cfg.n_jobs_fixed < 1:
        out.append(Violation("n_jobs_fixed", "n_jobs_fixed must be >= 1"))
    return ValidationReport(tuple(out))


def validate_stream(stream: EventStream) -> ValidationReport:
    """Check the structural invariants every produced stream must satisfy."""
    out: list[Violation] = []
    H = stream.horizon
    plant = stream.config.plant
    templates = plant.template_index
    machines = plant.speeds
    seen_jobs: set[int] = set()
    prev = None
    for i, e in enumerate(stream.events):
        path = f"events[{i}]"
        key = (e.time, KIND_RANK[e.kind], e.eid)
        if prev is not None and key < prev:
            out.append(Violation(path, "stream not sorted"))
        prev = key
        if prev is not None and i > 0 and e.eid <= stream.events[i - 1].eid:
            out.append(Violation(f"{path}.eid", "event ids not monotone"))
        p = e.payload
        # MachineUp may land exactly at H + 0; Down events are clipped to H by construction.
        if not (0.0 <= e.time <= H + 1e-9):
            out.append(Violation(f"{path}.time", f"timestamp {e.time:g} outside [0, {H:g}]"))
        if e.kind is EventKind.JOB_ARRIVAL:
            job = p.job
            if job.job_id in seen_jobs:
                out.append(Violation(f"{path}.job.job_id", f"duplicate job id {job.job_id}"))
            seen_jobs.add(job.job_id)
            tpl = templates.get(job.template)
            if tpl is None:
                out.append(Violation(f"{path}.job.template", f"unknown template {job.template}"))
            elif len(job.processing) != len(tpl.operations):
                out.append(Violation(f"{path}.job.processing", "processing length differs from template"))
            if any(not x > 0 for x in job.processing):
                out.append(Violation(f"{path}.job.processing", "processing times must be > 0"))
            if job.due < job.arrival - 1e-9 or job.due > H + 1e-9:
                out.append(Violation(f"{path}.job.due", f"due {job.due:g} outside [arrival, H]"))
            if abs(job.arrival - e.time) > 1e-12:
                out.append(Violation(f"{path}.job.arrival", "arrival differs from event time"))
        elif e.kind in (EventKind.MACHINE_DOWN, EventKind.PREVENTIVE_MAINTENANCE, EventKind.MACHINE_UP):
            if p.machine not in machines:
                out.append(Violation(f"{path}.machine", f"unknown machine {p.machine}"))
            if e.kind is not EventKind.MACHINE_UP and p.duration < 0:
                out.append(Violation(f"{path}.duration", "negative outage duration"))
        else:
            if p.job_id not in seen_jobs:
                out.append(Violation(f"{path}.job_id", f"job {p.job_id} not arrived before event"))
            if e.kind is EventKind.ROUTE_CHANGE and p.template not in templates:
                out.append(Violation(f"{path}.template", f"unknown template {p.template}"))
    return ValidationReport(tuple(out))


# ---------------------------------------------------------------------------
# Seeding
# ---------------------------------------------------------------------------


def derive_seed(seed: int, *keys) -> int:
    """Stable 64-bit child seed of ``seed`` and arbitrary key parts."""
    text = "/".join([str(int(seed))] + [str(k) for k in keys])
    digest = hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def derive_stream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for one named randomness stream."""
    if name not in STREAM_NAMES:
        raise ValueError(f"unknown stream name {name!r}; expected one of {STREAM_NAMES}")
    return np.random.Generator(np.random.PCG64(derive_seed(seed, name)))


@lru_cache(maxsize=64)
def template_groups(plant: PlantSpec) -> dict[str, tuple[str, ...]]:
    return {t.id: tuple(op.group for op in t.operations) for t in plant.templates}
