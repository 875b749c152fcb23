"""Turn an :class:`InputConfig` into a realized event stream."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .model import (
    Cancellation,
    DueDateChange,
    EventStream,
    InputConfig,
    JobArrival,
    JobSpec,
    MachineDown,
    Outage,
    PlantSpec,
    PreventiveMaintenance,
    PriorityChange,
    Rework,
    RouteChange,
    RouteOp,
    derive_stream,
)

SHAPE_CAP = 1e6
WARP_TOL = 1e-9
FIXED_COUNT_SPAN = 0.999
BUDGET_CAP = 0.95


class GenerationError(ValueError):
    """Raised when a configuration cannot be realized."""


@dataclass(frozen=True)
class WindowBudget:
    index: int
    capacity: float
    workload: float
    budget: float
    capped: bool = False


@dataclass(frozen=True)
class GenerationPlan:
    rate: float
    arrivals: tuple[float, ...]
    global_budget: float
    windows: tuple[WindowBudget, ...]
    outages: tuple[Outage, ...]
    notes: tuple[str, ...] = field(default_factory=tuple)


# ---------------------------------------------------------------------------
# Rates and arrivals
# ---------------------------------------------------------------------------


def compute_base_rate(cfg: InputConfig) -> float:
    """Jobs per unit time implied by the utilization target or fixed count."""
    if cfg.n_jobs_fixed is not None:
        return cfg.n_jobs_fixed / cfg.horizon
    mean_p = cfg.plant.mean_work()
    if not mean_p > 0:
        raise GenerationError("expected work per job is zero")
    return cfg.targets.rho_global * cfg.plant.total_speed / mean_p


def gamma_shape(scv: float) -> float:
    """Gamma shape for a given SCV, clamped for near-deterministic targets."""
    if scv <= 1.0 / SHAPE_CAP:
        return SHAPE_CAP
    return 1.0 / scv


def arrival_gamma(rate: float, c_a2: float) -> tuple[float, float]:
    """Shape/scale of Gamma inter-arrivals with mean ``1/rate`` and SCV ``c_a2``."""
    if not (rate > 0 and c_a2 > 0):
        raise GenerationError(f"arrival parameters must be positive (rate={rate}, c_a2={c_a2})")
    k = gamma_shape(c_a2)
    return k, 1.0 / (k * rate)


def sample_arrivals(
    rate: float,
    c_a2: float,
    horizon: float,
    rng: np.random.Generator,
    *,
    n_fixed: int | None = None,
    shape: float | None = None,
    scale: float | None = None,
    limit: float | None = None,
) -> np.ndarray:
    """Cumulative Gamma renewal timestamps.

    Without ``n_fixed`` timestamps are emitted while they stay below ``limit``
    (default ``horizon``). With ``n_fixed`` exactly that many are drawn and
    rescaled so the last one sits at ``0.999 * horizon``.
    """
    k, theta = arrival_gamma(rate, c_a2)
    if shape is not None:
        k = shape
        theta = scale if scale is not None else 1.0 / (k * rate)
    elif scale is not None:
        theta = scale
    if not (k > 0 and theta > 0):
        raise GenerationError("arrival shape and scale must be positive")

    if n_fixed is not None:
        times = np.cumsum(rng.gamma(k, theta, size=n_fixed))
        if times[-1] <= 0:
            return np.zeros(n_fixed)
        return times * (FIXED_COUNT_SPAN * horizon / times[-1])

    end = horizon if limit is None else limit
    mean_gap = k * theta
    chunk = int(end / mean_gap * 1.2 + 10.0 * math.sqrt(end / mean_gap + 1.0)) + 16
    parts = []
    last = 0.0
    while True:
        times = last + np.cumsum(rng.gamma(k, theta, size=chunk))
        parts.append(times)
        if times[-1] >= end:
            break
        last = times[-1]
    times = np.concatenate(parts)
    return times[times < end]


def cumulative_intensity(t, profile: str, amplitude: float, period: float, horizon: float):
    """Integrated modulation envelope, evaluated in closed form."""
    t = np.asarray(t, dtype=float)
    if profile == "constant" or amplitude == 0.0:
        return t.copy()
    if profile == "periodic":
        w = 2.0 * math.pi / period
        return t + amplitude / w * (1.0 - np.cos(w * t))
    if profile == "linear":
        return t * (1.0 - amplitude) + amplitude * t * t / horizon
    raise GenerationError(f"unknown profile {profile!r}")


def warp_times(raw, profile: str, amplitude: float, period: float, horizon: float) -> np.ndarray:
    """Map stationary timestamps through the inverse cumulative intensity.

    The inverse is found by vectorized bisection on ``[0, H(1+A)]`` to an
    absolute tolerance of 1e-9; results are clipped to ``[0, H]``.
    """
    raw = np.asarray(raw, dtype=float)
    if profile == "constant" or amplitude == 0.0:
        return raw.copy()
    lo = np.zeros_like(raw)
    hi = np.full_like(raw, horizon * (1.0 + amplitude))
    steps = int(math.ceil(math.log2(max(horizon * (1.0 + amplitude), 1e-300) / WARP_TOL))) + 1
    for _ in range(max(steps, 1)):
        mid = 0.5 * (lo + hi)
        below = cumulative_intensity(mid, profile, amplitude, period, horizon) < raw
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
    # Same step count for every element keeps the map monotone in ``raw``.
    return np.clip(0.5 * (lo + hi), 0.0, horizon)


def assign_due_dates(arrivals, works, tau: float, horizon: float) -> np.ndarray:
    """Baseline due dates ``min(t + tau * W, H)``."""
    return np.minimum(np.asarray(arrivals, float) + tau * np.asarray(works, float), horizon)


# ---------------------------------------------------------------------------
# Jobs
# ---------------------------------------------------------------------------


def processing_shape(cfg: InputConfig) -> float:
    if cfg.distri.processing_shape is not None:
        return cfg.distri.processing_shape
    return gamma_shape(cfg.targets.c_p2)


def sample_processing(means: np.ndarray, shape: float, rng: np.random.Generator) -> np.ndarray:
    """Gamma draws with the given per-element means and a common shape."""
    out = rng.gamma(shape, 1.0, size=means.shape) * (means / shape)
    # Gamma draws can underflow to 0 for tiny shapes; keep strictly positive.
    return np.maximum(out, np.finfo(float).tiny * 1e10)


def sample_jobs(cfg: InputConfig, arrivals, rng: np.random.Generator, batch_rng: np.random.Generator | None = None):
    """Draw templates, processing times and batch expansion for each arrival.

    Returns ``(times, templates, processing, batch_ids)``; due dates are
    assigned separately.
    """
    plant = cfg.plant
    arrivals = np.asarray(arrivals, dtype=float)
    n = arrivals.size
    batch_rng = rng if batch_rng is None else batch_rng
    dyn = cfg.dyn
    d = cfg.distri

    if dyn.p_batch > 0 and n:
        expand = batch_rng.random(n) < dyn.p_batch
        sizes_raw = batch_rng.normal(d.batch_mean, d.batch_std, size=n)
        sizes = np.where(expand, np.maximum(1, np.ceil(sizes_raw)), 1).astype(int)
    else:
        sizes = np.ones(n, dtype=int)

    mix = np.asarray(plant.job_mix, dtype=float)
    tpl_per_arrival = rng.choice(len(plant.templates), size=n, p=mix / mix.sum()) if n else np.zeros(0, int)
    times = np.repeat(arrivals, sizes)
    tpl_idx = np.repeat(tpl_per_arrival, sizes)
    batch_ids = np.repeat(np.arange(n), sizes)

    op_means, lengths = _template_arrays(plant)
    shape = processing_shape(cfg)
    counts = lengths[tpl_idx]
    means = np.concatenate([op_means[i] for i in tpl_idx]) if tpl_idx.size else np.zeros(0)
    flat = sample_processing(means, shape, rng)
    bounds = np.concatenate([[0], np.cumsum(counts)]).tolist()
    processing = [flat[a:b] for a, b in zip(bounds[:-1], bounds[1:])]
    return times, tpl_idx, processing, batch_ids


_TEMPLATE_CACHE: dict[int, tuple] = {}


def _template_arrays(plant: PlantSpec):
    key = id(plant)
    hit = _TEMPLATE_CACHE.get(key)
    if hit is not None and hit[0] is plant:
        return hit[1], hit[2]
    means = [np.array([op.mean for op in t.operations], dtype=float) for t in plant.templates]
    lengths = np.array([len(t.operations) for t in plant.templates], dtype=int)
    if len(_TEMPLATE_CACHE) > 256:
        _TEMPLATE_CACHE.clear()
    _TEMPLATE_CACHE[key] = (plant, means, lengths)
    return means, lengths


# ---------------------------------------------------------------------------
# Outages
# ---------------------------------------------------------------------------


def free_gaps(busy, lo: float, hi: float) -> list[tuple[float, float]]:
    """Complement of ``busy`` intervals within ``[lo, hi]``."""
    gaps = []
    cursor = lo
    for s, e in sorted(busy):
        if e <= cursor:
            continue
        if s > cursor:
            gaps.append((cursor, min(s, hi)))
        cursor = max(cursor, e)
        if cursor >= hi:
            break
    if cursor < hi:
        gaps.append((cursor, hi))
    return [(s, e) for s, e in gaps if e - s > 1e-12]


def place_in_gaps(gaps, length: float, rng: np.random.Generator) -> tuple[float, float] | None:
    """Pick a uniformly random position for an interval of ``length``.

    Start positions are uniform over all placements that fit. If no gap is
    long enough the largest gap is used in full. Returns ``None`` when
    there is no free time at all.
    """
    if not gaps:
        return None
    slack = [(e - s) - length for s, e in gaps]
    total = sum(x for x in slack if x > 0)
    if total > 0:
        u = rng.random() * total
        for (s, _), x in zip(gaps, slack):
            if x > 0:
                if u <= x:
                    return s + u, s + u + length
                u -= x
        s, e = gaps[max(i for i, x in enumerate(slack) if x > 0)]
        return e - length, e
    exact = [g for g, x in zip(gaps, slack) if x == 0]
    if exact:
        return exact[int(rng.integers(len(exact)))]
    return max(gaps, key=lambda g: g[1] - g[0])


def window_workload(cfg: InputConfig, jobs, start: float, end: float, group: str) -> float:
    """Nominal work released to ``group`` by jobs arriving in ``[start, end]``."""
    groups = cfg.plant.template_index
    total = 0.0
    for job in jobs:
        if start <= job.arrival <= end:
            ops = groups[job.template].operations
            total += sum(p for op, p in zip(ops, job.processing) if op.group == group)
    return total


def window_budget(capacity: float, workload: float, rho: float) -> tuple[float, bool]:
    """Capacity loss needed in a window; capped at 95% of capacity."""
    budget = max(capacity - workload / rho, 0.0)
    if budget > BUDGET_CAP * capacity:
        return BUDGET_CAP * capacity, True
    return budget, False


def plan_disturbances(cfg: InputConfig, jobs, rng: np.random.Generator):
    """Realize the disturbance budgets as non-overlapping outages.

    Order of placement: scheduled maintenance, bottleneck-window outages on
    the window's group, then random breakdowns for whatever global budget
    remains (kept out of the bottleneck windows of their group).

    Returns ``(outages, global_budget, window_budgets, notes)``.
    """
    plant = cfg.plant
    H = cfg.horizon
    speeds = plant.speeds
    machine_ids = [m.id for m in plant.machines]
    busy: dict[str, list[tuple[float, float]]] = {m: [] for m in machine_ids}
    outages: list[Outage] = []
    notes: list[str] = []
    d = cfg.distri

    pm_interval = cfg.dyn.pm_interval
    if pm_interval is not None:
        for m in machine_ids:
            t = rng.random() * pm_interval
            while t < H:
                dur = max(rng.normal(d.pm_mean, d.pm_std), 0.0)
                dur = min(dur, H - t)
                if dur > 0 and not any(s < t + dur and t < e for s, e in busy[m]):
                    outages.append(Outage(m, t, t + dur, pm=True))
                    busy[m].append((t, t + dur))
                t += pm_interval

    windows = []
    protected: dict[str, list[tuple[float, float]]] = {m: [] for m in machine_ids}
    for i, b in enumerate(cfg.targets.bottlenecks):
        members = plant.group_machines[b.group]
        v_g = plant.group_speed[b.group]
        capacity = v_g * (b.end - b.start)
        workload = window_workload(cfg, jobs, b.start, b.end, b.group)
        budget, capped = window_budget(capacity, workload, b.rho)
        if capped:
            notes.append(f"bottleneck {i}: budget exceeds capacity, capped at {BUDGET_CAP:g} of C_b")
        windows.append(WindowBudget(i, capacity, workload, budget, capped))
        per_machine = budget / v_g
        for m in members:
            existing = sum(max(0.0, min(e, b.end) - max(s, b.start)) for s, e in busy[m])
            need = per_machine - existing
            while need > 1e-12:
                gaps = free_gaps(busy[m], b.start, b.end)
                spot = place_in_gaps(gaps, need, rng)
                if spot is None:
                    notes.append(f"bottleneck {i}: machine {m} saturated")
                    break
                outages.append(Outage(m, spot[0], spot[1]))
                busy[m].append(spot)
                need -= spot[1] - spot[0]
            protected[m].append((b.start, b.end))

    global_budget = cfg.targets.delta * H * plant.total_speed
    used = sum(speeds[o.machine] * o.duration for o in outages)
    remaining = global_budget - used
    if remaining < -1e-9:
        notes.append("scheduled outages exceed the global disturbance budget")
    full: set[str] = set()
    guard = 0
    while remaining > 1e-9 * max(global_budget, 1.0) and len(full) < len(machine_ids) and guard < 100000:
        guard += 1
        m = machine_ids[int(rng.integers(len(machine_ids)))]
        if m in full:
            continue
        length = min(rng.exponential(d.repair_mean), remaining / speeds[m])
        gaps = free_gaps(busy[m] + protected[m], 0.0, H)
        spot = place_in_gaps(gaps, length, rng)
        if spot is None:
            full.add(m)
            continue
        outages.append(Outage(m, spot[0], spot[1]))
        busy[m].append(spot)
        remaining -= speeds[m] * (spot[1] - spot[0])
    if remaining > 1e-6 * max(global_budget, 1.0):
        notes.append(f"global disturbance budget short by {remaining:.6g}")
    return outages, global_budget, tuple(windows), notes


# ---------------------------------------------------------------------------
# Scenario events
# ---------------------------------------------------------------------------


def route_operations(plant: PlantSpec, template_index: int, processing) -> tuple[RouteOp, ...]:
    tpl = plant.templates[template_index]
    return tuple(RouteOp(op.group, op.mean, float(p)) for op, p in zip(tpl.operations, processing))


def scenario_events(cfg: InputConfig, jobs, rng: np.random.Generator) -> list[tuple[float, object]]:
    """Per-job Bernoulli scenario events timed uniformly in ``[t_j, D_j]``."""
    dyn = cfg.dyn
    plant = cfg.plant
    kinds = (
        ("cancel", dyn.p_cancel),
        ("rework", dyn.p_rework),
        ("prio", dyn.p_prio),
        ("route", dyn.p_route),
        ("due", dyn.p_dd_chg),
    )
    if not any(p > 0 for _, p in kinds) or not jobs:
        return []
    n = len(jobs)
    mix = np.asarray(plant.job_mix, float)
    mix = mix / mix.sum()
    shape = processing_shape(cfg)
    op_means, _ = _template_arrays(plant)
    out = []
    for name, p in kinds:
        if p <= 0:
            continue
        hits = np.flatnonzero(rng.random(n) < p)
        u = rng.random(hits.size)
        for j, frac in zip(hits, u):
            job = jobs[j]
            t = job.arrival + frac * (job.due - job.arrival)
            if name == "cancel":
                payload = Cancellation(job.job_id)
            elif name == "rework":
                payload = Rework(job.job_id, int(rng.integers(len(job.processing))))
            elif name == "prio":
                payload = PriorityChange(job.job_id, job.priority + 1)
            elif name == "route":
                k = int(rng.choice(len(plant.templates), p=mix))
                proc = sample_processing(op_means[k], shape, rng)
                payload = RouteChange(job.job_id, plant.templates[k].id, route_operations(plant, k, proc))
            else:
                new_due = job.arrival + dyn.due_tightening * (job.due - job.arrival)
                payload = DueDateChange(job.job_id, float(max(t, new_due)))
            out.append((float(t), payload))
    return out


# ---------------------------------------------------------------------------
# Orchestration
# ---------------------------------------------------------------------------


def arrival_times(cfg: InputConfig, rng: np.random.Generator) -> tuple[float, np.ndarray]:
    """Base rate and warped arrival timestamps (initial WIP at t=0 prepended)."""
    rate = compute_base_rate(cfg)
    d = cfg.distri
    H = cfg.horizon
    if rate <= 0:
        raw = np.zeros(0)
    else:
        limit = float(cumulative_intensity(H, d.profile, d.amplitude, d.period, H))
        raw = sample_arrivals(
            rate,
            cfg.targets.c_a2,
            H,
            rng,
            n_fixed=cfg.n_jobs_fixed,
            shape=d.arrival_shape,
            scale=d.arrival_scale,
            limit=limit,
        )
        if cfg.n_jobs_fixed is not None:
            raw = raw * (limit / H)
    times = warp_times(raw, d.profile, d.amplitude, d.period, H)
    if d.initial_wip:
        times = np.concatenate([np.zeros(d.initial_wip), times])
    return rate, times


def generate_plan(cfg: InputConfig) -> tuple[EventStream, GenerationPlan]:
    """Generate an instance and return it with its generation plan."""
    seed = cfg.seed
    rate, times = arrival_times(cfg, derive_stream(seed, "arrivals"))
    proc_rng = derive_stream(seed, "processing")
    arr, tpl_idx, processing, batch_ids = sample_jobs(cfg, times, proc_rng, derive_stream(seed, "batch"))

    if processing:
        offsets = np.cumsum([0] + [p.size for p in processing[:-1]])
        works = np.add.reduceat(np.concatenate(processing), offsets)
    else:
        works = np.zeros(0)
    dues = assign_due_dates(arr, works, cfg.targets.tau, cfg.horizon)

    scen_rng = derive_stream(seed, "scenario")
    if cfg.dyn.p_ptime > 0 and processing:
        mults = np.asarray(cfg.dyn.ptime_multipliers, float)
        for i, p in enumerate(processing):
            hit = scen_rng.random(p.size) < cfg.dyn.p_ptime
            if hit.any():
                processing[i] = np.where(hit, p * mults[scen_rng.integers(mults.size, size=p.size)], p)

    tpl_ids = [t.id for t in cfg.plant.templates]
    jobs = [
        JobSpec(j, t, tpl_ids[k], tuple(p.tolist()), d, b)
        for j, (t, k, p, d, b) in enumerate(
            zip(arr.tolist(), tpl_idx.tolist(), processing, dues.tolist(), batch_ids.tolist())
        )
    ]
    outages, budget, windows, notes = plan_disturbances(cfg, jobs, derive_stream(seed, "disturbance"))
    events: list[tuple[float, object]] = [(job.arrival, JobArrival(job)) for job in jobs]
    events += outage_payloads(outages)
    events += scenario_events(cfg, jobs, scen_rng)
    stream = EventStream.build(events, cfg.horizon, cfg)
    plan = GenerationPlan(rate, tuple(times.tolist()), budget, windows, tuple(outages), tuple(notes))
    return stream, plan


def outage_payloads(outages) -> list[tuple[float, object]]:
    out = []
    for o in outages:
        cls = PreventiveMaintenance if o.pm else MachineDown
        out.append((o.start, cls(o.machine, o.end - o.start)))
    return out


def generate_instance(cfg: InputConfig) -> EventStream:
    """Deterministic event stream for ``cfg`` (seeded by ``cfg.seed``)."""
    return generate_plan(cfg)[0]
