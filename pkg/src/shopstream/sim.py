"""Discrete-event simulation of a flexible job shop over an event stream.

The kernel stops at every decision epoch (an instant with at least one
ready operation and one idle, available machine in its group) and hands the
caller an immutable :class:`Snapshot`. Breakdowns preempt the running
operation, which resumes when the machine comes back up.
"""

from __future__ import annotations

import heapq
import json
import math
from dataclasses import dataclass, field, replace
from types import MappingProxyType
from typing import IO, Iterable, Mapping, NamedTuple

from .model import EventKind, EventStream, RouteOp

LEVELS = ("L1", "L2", "L3")

_WORK_KINDS = (EventKind.JOB_ARRIVAL, EventKind.REWORK)


class SimulationError(RuntimeError):
    pass


class Action(NamedTuple):
    job: int
    op: int
    machine: str


PASS = None


@dataclass(frozen=True)
class JobState:
    job_id: int
    arrival: float
    template: str
    route: tuple[RouteOp, ...]
    next_op: int = 0
    running: bool = False
    due: float = math.inf
    priority: int = 0
    cancelled: bool = False
    batch: int = 0

    @property
    def completed_ops(self) -> int:
        return self.next_op - 1 if self.running else self.next_op

    @property
    def finished(self) -> bool:
        return not self.running and self.next_op >= len(self.route)

    @property
    def ready(self) -> bool:
        return not self.running and not self.cancelled and self.next_op < len(self.route)

    @property
    def remaining_ops(self) -> int:
        return len(self.route) - self.next_op

    @property
    def remaining_nominal(self) -> float:
        return sum(op.mean for op in self.route[self.next_op :])


@dataclass(frozen=True)
class MachineState:
    """``status`` is idle, busy or down; a down machine may hold a
    suspended operation (``job``/``op`` set, ``remaining`` > 0)."""

    id: str
    group: str
    speed: float
    status: str = "idle"
    job: int | None = None
    op: int | None = None
    start: float = 0.0
    end: float = math.inf
    remaining: float = 0.0
    down_depth: int = 0
    down_until: float = 0.0
    idle_since: float = 0.0
    busy_time: float = 0.0
    assigned_work: float = 0.0
    gap_start: float = 0.0

    def available_at(self, clock: float) -> float:
        if self.status == "idle":
            return clock
        if self.status == "busy":
            return self.end
        return self.down_until + self.remaining


@dataclass(frozen=True)
class ExecRecord:
    job: int
    op: int
    machine: str
    start: float
    end: float
    processing: float
    duration: float
    gaps: tuple[tuple[float, float], ...] = ()
    group: str = ""


@dataclass(frozen=True)
class AppliedEvent:
    time: float
    eid: int
    kind: str
    job: int | None = None
    machine: str | None = None
    note: str = ""


@dataclass(frozen=True)
class Trajectory:
    """Executed operations of one episode, sorted by start time."""

    records: tuple[ExecRecord, ...]
    events: tuple[AppliedEvent, ...]
    agent: str = ""
    instance: str = ""
    makespan: float = 0.0
    complete: bool = True
    warnings: tuple[str, ...] = ()


@dataclass(frozen=True)
class Snapshot:
    """Read-only view of the simulator at a decision epoch.

    Job and machine entries are frozen; the mappings are private copies.
    ``fork()`` returns an independent simulator continuing from here.
    """

    clock: float
    machines: tuple[MachineState, ...]
    jobs: Mapping[int, JobState]
    actions: tuple[Action, ...]
    cursor: int
    done: bool
    event_counts: Mapping[str, int]
    _sim: "Simulator" = field(repr=False, compare=False)
    _log_len: int = field(default=0, repr=False)
    _event_len: int = field(default=0, repr=False)
    _heap: tuple = field(default=(), repr=False)
    _open_gaps: tuple = field(default=(), repr=False)

    @property
    def stream(self) -> EventStream:
        return self._sim.stream

    @property
    def ready(self) -> tuple[JobState, ...]:
        return tuple(self.jobs[j] for j in sorted({a.job for a in self.actions}))

    @property
    def records(self) -> tuple[ExecRecord, ...]:
        return tuple(self._sim._log[: self._log_len])

    def fork(self) -> Simulator:
        return Simulator._from_snapshot(self)


class Simulator:
    """Reset/step environment over one event stream."""

    def __init__(self, stream: EventStream):
        self.stream = stream
        plant = stream.config.plant
        self._template_ops = {t.id: tuple((op.group, op.mean) for op in t.operations) for t in plant.templates}
        self._group_machines = plant.group_machines
        self._midx = {m.id: i for i, m in enumerate(plant.machines)}
        self._machine_group = plant.machine_group
        # Number of arrival/rework events at or after each cursor position.
        events = stream.events
        tail = [0] * (len(events) + 1)
        for i in range(len(events) - 1, -1, -1):
            tail[i] = tail[i + 1] + (events[i].kind in _WORK_KINDS)
        self._pending_work = tail
        self._started = False

    # -- lifecycle ---------------------------------------------------------

    def reset(self) -> Snapshot:
        if not self.stream.jobs:
            raise SimulationError("stream has no job arrivals")
        plant = self.stream.config.plant
        self.clock = 0.0
        self.machines = [MachineState(m.id, plant.machine_group[m.id], m.speed) for m in plant.machines]
        self.jobs: dict[int, JobState] = {}
        self.cursor = 0
        self._heap: list[tuple[float, int, str]] = []  # maintenance ends
        self._log: list[ExecRecord] = []
        self._applied: list[AppliedEvent] = []
        self._gaps: dict[str, list[tuple[float, float]]] = {}
        self._counts: dict[str, int] = {}
        self._warnings: list[str] = []
        self._done = False
        self._started = True
        self._process_instant()
        return self._advance()

    @classmethod
    def _from_snapshot(cls, snap: Snapshot) -> Simulator:
        src = snap._sim
        sim = cls.__new__(cls)
        sim.__dict__.update(
            {k: v for k, v in src.__dict__.items() if k in ("stream", "_template_ops", "_group_machines", "_midx", "_machine_group", "_pending_work")}
        )
        sim.clock = snap.clock
        sim.machines = list(snap.machines)
        sim.jobs = dict(snap.jobs)
        sim.cursor = snap.cursor
        sim._heap = list(snap._heap)
        sim._log = list(src._log[: snap._log_len])
        sim._applied = list(src._applied[: snap._event_len])
        sim._gaps = {k: list(v) for k, v in snap._open_gaps}
        sim._counts = dict(snap.event_counts)
        sim._warnings = []
        sim._done = snap.done
        sim._started = True
        return sim

    @property
    def done(self) -> bool:
        return self._done

    def snapshot(self) -> Snapshot:
        return Snapshot(
            clock=self.clock,
            machines=tuple(self.machines),
            jobs=MappingProxyType(dict(self.jobs)),
            actions=tuple(self.admissible()),
            cursor=self.cursor,
            done=self._done,
            event_counts=MappingProxyType(dict(self._counts)),
            _sim=self,
            _log_len=len(self._log),
            _event_len=len(self._applied),
            _heap=tuple(self._heap),
            _open_gaps=tuple((k, tuple(v)) for k, v in self._gaps.items()),
        )

    # -- decisions ---------------------------------------------------------

    def admissible(self) -> list[Action]:
        idle = {}
        for m in self.machines:
            if m.status == "idle":
                idle.setdefault(m.group, []).append(m.id)
        if not idle:
            return []
        out = []
        for j in sorted(self.jobs):
            job = self.jobs[j]
            if not job.ready:
                continue
            for mid in idle.get(job.route[job.next_op].group, ()):
                out.append(Action(j, job.next_op, mid))
        return out

    def step(self, action: Action | None) -> tuple[Snapshot, bool]:
        """Start ``action`` (or pass with ``None``) and move to the next epoch."""
        if not self._started:
            raise SimulationError("call reset() first")
        if self._done:
            raise SimulationError("episode already finished")
        if action is None:
            if not self._next_time() < math.inf:
                self._finish(incomplete=True)
                return self.snapshot(), True
            self._jump()
        else:
            self._start(Action(*action))
        snap = self._advance()
        return snap, snap.done

    def _start(self, a: Action) -> None:
        job = self.jobs.get(a.job)
        i = self._midx.get(a.machine)
        if job is None or i is None or not job.ready or job.next_op != a.op:
            raise SimulationError(f"inadmissible action {tuple(a)}")
        m = self.machines[i]
        op = job.route[a.op]
        if m.status != "idle" or m.group != op.group:
            raise SimulationError(f"inadmissible action {tuple(a)}")
        dur = op.processing / m.speed
        self.machines[i] = replace(
            m, status="busy", job=a.job, op=a.op, start=self.clock, end=self.clock + dur,
            remaining=0.0, assigned_work=m.assigned_work + op.processing,
        )
        self.jobs[a.job] = replace(job, next_op=a.op + 1, running=True)
        self._gaps[f"{a.job}/{a.op}"] = []

    # -- time advance ------------------------------------------------------

    def _next_time(self) -> float:
        t = math.inf
        for m in self.machines:
            if m.status == "busy" and m.end < t:
                t = m.end
        if self._heap and self._heap[0][0] < t:
            t = self._heap[0][0]
        events = self.stream.events
        if self.cursor < len(events) and events[self.cursor].time < t:
            t = events[self.cursor].time
        return t

    def _jump(self) -> None:
        t = self._next_time()
        if t == math.inf:
            return
        self.clock = max(self.clock, t)
        self._process_instant()

    def _advance(self) -> Snapshot:
        """Advance to the next decision epoch or the end of the episode."""
        while True:
            if self._finished():
                self._finish()
                return self.snapshot()
            if self.admissible():
                return self.snapshot()
            if self._next_time() == math.inf:
                self._finish(incomplete=True)
                return self.snapshot()
            self._jump()

    def _finished(self) -> bool:
        if self._pending_work[self.cursor]:
            return False
        return all(j.finished for j in self.jobs.values())

    def _finish(self, incomplete: bool = False) -> None:
        self._done = True
        if incomplete and not self._finished():
            self._warnings.append("episode ended with unfinished operations")

    def _process_instant(self) -> None:
        t = self.clock
        for i, m in enumerate(self.machines):
            if m.status == "busy" and m.end <= t:
                self._complete(i)
        while self._heap and self._heap[0][0] <= t:
            _, _, machine = heapq.heappop(self._heap)
            self._machine_up(machine, t)
        events = self.stream.events
        while self.cursor < len(events) and events[self.cursor].time <= t:
            self._apply(events[self.cursor])
            self.cursor += 1

    def _complete(self, i: int) -> None:
        m = self.machines[i]
        job = self.jobs[m.job]
        op = job.route[m.op]
        key = f"{m.job}/{m.op}"
        gaps = tuple(self._gaps.pop(key, ()))
        self._log.append(
            ExecRecord(m.job, m.op, m.id, m.start, m.end, op.processing, op.processing / m.speed, gaps, m.group)
        )
        self.jobs[m.job] = replace(job, running=False)
        self.machines[i] = replace(
            m, status="idle", job=None, op=None, idle_since=m.end,
            busy_time=m.busy_time + (m.end - m.start) - sum(e - s for s, e in gaps), end=math.inf,
        )

    # -- exogenous events --------------------------------------------------

    def _count(self, kind: EventKind) -> None:
        self._counts[kind.value] = self._counts.get(kind.value, 0) + 1

    def _log_event(self, e, job=None, machine=None, note: str = "") -> None:
        self._applied.append(AppliedEvent(e.time, e.eid, e.kind.value, job, machine, note))

    def _apply(self, e) -> None:
        p = e.payload
        kind = e.kind
        self._count(kind)
        if kind is EventKind.JOB_ARRIVAL:
            job = p.job
            ops = self._template_ops[job.template]
            route = tuple(RouteOp(g, mu, float(x)) for (g, mu), x in zip(ops, job.processing))
            self.jobs[job.job_id] = JobState(
                job.job_id, job.arrival, job.template, route, due=job.due, priority=job.priority, batch=job.batch
            )
            self._log_event(e, job=job.job_id)
            return
        if kind is EventKind.MACHINE_DOWN or kind is EventKind.PREVENTIVE_MAINTENANCE:
            self._machine_down(p.machine, e.time, p.duration)
            if kind is EventKind.PREVENTIVE_MAINTENANCE:
                heapq.heappush(self._heap, (e.time + p.duration, e.eid, p.machine))
            self._log_event(e, machine=p.machine)
            return
        if kind is EventKind.MACHINE_UP:
            self._machine_up(p.machine, e.time)
            self._log_event(e, machine=p.machine)
            return
        job = self.jobs.get(p.job_id)
        if job is None:
            self._log_event(e, job=p.job_id, note="unknown job; ignored")
            return
        if kind is EventKind.CANCELLATION:
            if not job.cancelled:
                self.jobs[p.job_id] = replace(job, cancelled=True, route=job.route[: job.next_op])
            self._log_event(e, job=p.job_id)
        elif kind is EventKind.REWORK:
            if job.cancelled:
                self._log_event(e, job=p.job_id, note="job cancelled; dropped")
            elif 0 <= p.op_index < job.completed_ops:
                copy = job.route[p.op_index]
                route = job.route[: job.next_op] + (copy,) + job.route[job.next_op :]
                self.jobs[p.job_id] = replace(job, route=route)
                self._log_event(e, job=p.job_id)
            else:
                self._warnings.append(f"rework of job {p.job_id} op {p.op_index} before completion; dropped")
                self._log_event(e, job=p.job_id, note="operation not completed; dropped")
        elif kind is EventKind.PRIORITY_CHANGE:
            self.jobs[p.job_id] = replace(job, priority=p.priority)
            self._log_event(e, job=p.job_id)
        elif kind is EventKind.ROUTE_CHANGE:
            if job.cancelled:
                self._log_event(e, job=p.job_id, note="job cancelled; ignored")
            else:
                k = job.next_op
                self.jobs[p.job_id] = replace(job, route=job.route[:k] + tuple(p.operations[k:]), template=p.template)
                self._log_event(e, job=p.job_id)
        elif kind is EventKind.DUE_DATE_CHANGE:
            self.jobs[p.job_id] = replace(job, due=p.due)
            self._log_event(e, job=p.job_id)

    def _machine_down(self, machine: str, t: float, duration: float) -> None:
        i = self._midx[machine]
        m = self.machines[i]
        until = max(m.down_until, t + duration)
        if m.down_depth > 0:
            self.machines[i] = replace(m, down_depth=m.down_depth + 1, down_until=until)
            return
        if m.status == "busy":
            self.machines[i] = replace(
                m, status="down", remaining=m.end - t, end=math.inf, down_depth=1, down_until=until, gap_start=t
            )
        else:
            self.machines[i] = replace(m, status="down", down_depth=1, down_until=until, gap_start=t)

    def _machine_up(self, machine: str, t: float) -> None:
        i = self._midx[machine]
        m = self.machines[i]
        if m.down_depth == 0:
            return
        if m.down_depth > 1:
            self.machines[i] = replace(m, down_depth=m.down_depth - 1)
            return
        if m.job is not None:
            self._gaps[f"{m.job}/{m.op}"].append((m.gap_start, t))
            self.machines[i] = replace(m, status="busy", end=t + m.remaining, remaining=0.0, down_depth=0)
        else:
            self.machines[i] = replace(m, status="idle", down_depth=0, idle_since=t)

    # -- results -----------------------------------------------------------

    def trajectory(self, agent: str = "", instance: str = "") -> Trajectory:
        records = tuple(sorted(self._log, key=lambda r: (r.start, r.machine, r.job, r.op)))
        makespan = max((r.end for r in records), default=0.0)
        return Trajectory(
            records=records,
            events=tuple(self._applied),
            agent=agent,
            instance=instance,
            makespan=makespan,
            complete=self._done and self._finished(),
            warnings=tuple(self._warnings),
        )


def reset(stream: EventStream) -> tuple[Simulator, Snapshot]:
    sim = Simulator(stream)
    return sim, sim.reset()


def step(sim: Simulator, action: Action | None) -> tuple[Simulator, Snapshot, bool]:
    snap, done = sim.step(action)
    return sim, snap, done


def admissible_actions(snapshot: Snapshot) -> tuple[Action, ...]:
    return snapshot.actions


def run_episode(stream: EventStream, policy, agent: str = "", instance: str = "", max_steps: int | None = None) -> Trajectory:
    """Drive ``policy(snapshot) -> Action | None`` until the episode ends."""
    sim = Simulator(stream)
    snap = sim.reset()
    steps = 0
    while not snap.done:
        snap, _ = sim.step(policy(snap))
        steps += 1
        if max_steps is not None and steps > max_steps:
            raise SimulationError(f"episode exceeded {max_steps} steps")
    return sim.trajectory(agent=agent, instance=instance)


# ---------------------------------------------------------------------------
# Observations
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Observation:
    level: str
    data: Mapping

    def as_dict(self) -> dict:
        return {"level": self.level, **self.data}

    def __getitem__(self, key):
        return self.data[key]


L1_FIELDS = ("clock", "machines", "ready", "actions")
L2_FIELDS = L1_FIELDS + ("queue_lengths", "slack", "event_counts")
L3_FIELDS = L2_FIELDS + ("targets", "bottlenecks")


def _fin(x: float):
    return x if math.isfinite(x) else None


def encode_observation(snap: Snapshot, level: str = "L1", config=None) -> Observation:
    """Observation record with the field set of ``level``.

    ``config`` (an :class:`InputConfig`) is required for L3; when omitted
    it is taken from the snapshot's stream.
    """
    if level not in LEVELS:
        raise ValueError(f"unknown observation level {level!r}")
    clock = snap.clock
    machines = [
        {
            "id": m.id,
            "group": m.group,
            "speed": m.speed,
            "status": m.status,
            "available_at": _fin(m.available_at(clock)),
            "idle_since": m.idle_since,
            "busy_time": m.busy_time,
            "assigned_work": m.assigned_work,
        }
        for m in snap.machines
    ]
    ready = []
    for job in snap.ready:
        op = job.route[job.next_op]
        ready.append(
            {
                "job": job.job_id,
                "op": job.next_op,
                "group": op.group,
                "nominal": op.mean,
                "arrival": job.arrival,
                "remaining_work": job.remaining_nominal,
                "remaining_ops": job.remaining_ops,
                "priority": job.priority,
            }
        )
    data: dict = {
        "clock": clock,
        "machines": machines,
        "ready": ready,
        "actions": [list(a) for a in snap.actions],
    }
    if level in ("L2", "L3"):
        queues: dict[str, int] = {}
        slack = {}
        for job in snap.jobs.values():
            if job.ready:
                g = job.route[job.next_op].group
                queues[g] = queues.get(g, 0) + 1
            if not job.finished and not job.cancelled:
                rem = job.remaining_nominal
                slack[str(job.job_id)] = _fin((job.due - clock) / rem) if rem > 0 else None
        data["queue_lengths"] = dict(sorted(queues.items()))
        data["slack"] = slack
        data["event_counts"] = dict(sorted(snap.event_counts.items()))
    if level == "L3":
        cfg = config if config is not None else (snap.stream.config if snap._sim is not None else None)
        if cfg is None:
            raise ValueError("L3 observations need the instance configuration")
        t = cfg.targets
        data["targets"] = {
            "rho_global": t.rho_global,
            "c_a2": t.c_a2,
            "c_p2": t.c_p2,
            "tau": t.tau,
            "chi_load": t.chi_load,
            "delta": t.delta,
        }
        data["bottlenecks"] = [
            {"group": b.group, "start": b.start, "end": b.end, "rho": b.rho} for b in t.bottlenecks
        ]
    return Observation(level, MappingProxyType(data))


# ---------------------------------------------------------------------------
# Line protocol
# ---------------------------------------------------------------------------


def parse_action(line: str) -> Action | None:
    """Decode ``{"action": [job, op, machine]}`` or ``{"pass": true}``."""
    try:
        msg = json.loads(line)
    except json.JSONDecodeError as exc:
        raise SimulationError(f"malformed action record: {exc}") from None
    if isinstance(msg, dict) and msg.get("pass"):
        return None
    if not isinstance(msg, dict) or "action" not in msg:
        raise SimulationError("action record needs an 'action' or 'pass' field")
    a = msg["action"]
    if not (isinstance(a, list) and len(a) == 3):
        raise SimulationError("action must be [job, op, machine]")
    return Action(int(a[0]), int(a[1]), str(a[2]))


def serve_stdio(stream: EventStream, reader: IO[str], writer: IO[str], level: str = "L1") -> Trajectory:
    """Run an episode driven by an external agent over line-delimited JSON.

    One observation record is written per epoch; one action record is read
    back. A final ``{"done": true, ...}`` record closes the episode.
    """
    sim = Simulator(stream)
    snap = sim.reset()
    while not snap.done:
        writer.write(json.dumps(encode_observation(snap, level).as_dict(), allow_nan=False) + "\n")
        writer.flush()
        line = reader.readline()
        if not line:
            raise SimulationError("agent closed the stream before the episode ended")
        snap, _ = sim.step(parse_action(line))
    traj = sim.trajectory(agent="stdio")
    writer.write(json.dumps({"done": True, "makespan": traj.makespan, "complete": traj.complete}) + "\n")
    writer.flush()
    return traj


def simulate(stream: EventStream, agent, instance: str = "") -> Trajectory:
    """Run one episode with an agent exposing ``decide(snapshot)`` and ``name``."""
    if hasattr(agent, "reset"):
        agent.reset()
    return run_episode(stream, agent.decide, agent=getattr(agent, "name", ""), instance=instance)


def iter_epochs(stream: EventStream, policy) -> Iterable[Snapshot]:
    sim = Simulator(stream)
    snap = sim.reset()
    while not snap.done:
        yield snap
        snap, _ = sim.step(policy(snap))
    yield snap
