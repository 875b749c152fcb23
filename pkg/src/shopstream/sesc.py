"""Greedy event-space calibration of an instance toward target metrics.

The calibrator repeatedly scores a small catalog of stream edits against the
current normalized error vector, applies the most promising one and keeps it
only if the Euclidean norm of the error vector strictly decreases.

Catalog:

``arrival``
    Rate correction (delete or duplicate jobs), mix correction (paired
    delete/duplicate swaps that rebalance group loads) and renewal
    resampling of arrival timestamps. Rate and mix corrections finish with a
    renewal resample so the arrival SCV stays on target.
``slack``
    Multiplicative scaling of every job's baseline slack.
``processing``
    Workload-conserving resampling of processing times.
``bottleneck``
    Stretching or shrinking outages inside bottleneck windows, then
    rebalancing the remaining downtime to the global disturbance target.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .generator import cumulative_intensity, free_gaps, outage_payloads, place_in_gaps, warp_times
from .metrics import METRIC_KEYS, ObservedMetrics, _op_groups, merge_downtimes, observed_metrics
from .model import (
    DueDateChange,
    EventKind,
    EventStream,
    JobArrival,
    JobSpec,
    Outage,
    TargetMetrics,
    derive_seed,
)

STRATEGIES = ("arrival", "slack", "processing", "bottleneck")

DEFAULT_IMPACTS = (
    #              rho   c_a2  c_p2  tau   chi   delta eps_bn
    ("arrival", (0.9, 0.8, 0.0, -0.2, 0.5, 0.0, 0.0)),
    ("slack", (0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0)),
    ("processing", (0.0, 0.0, 0.9, 0.0, 0.0, 0.0, 0.0)),
    ("bottleneck", (-0.1, 0.0, 0.0, 0.0, 0.0, 0.3, 0.9)),
)

ALPHA_MIN, ALPHA_MAX = 0.05, 20.0
ARRIVAL_SPAN = 0.999


class CalibrationError(ValueError):
    """Raised when an operator cannot be applied to a stream."""


@dataclass(frozen=True)
class CalibratorConfig:
    targets: TargetMetrics | None = None
    tol: float = 0.05
    lambda_soft: float = 1.0
    lambda_hard: float = 10.0
    eps: float = 1e-6
    eta_tau: float = 0.5
    max_iter: int = 60
    job_cap: float = 0.10
    candidates: int = 16
    impacts: tuple[tuple[str, tuple[float, ...]], ...] = DEFAULT_IMPACTS
    disabled: tuple[str, ...] = ()
    seed: int = 0

    def __post_init__(self):
        if not self.lambda_hard > self.lambda_soft > 0:
            raise ValueError("penalties must satisfy lambda_hard > lambda_soft > 0")
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        unknown = set(self.disabled) - set(STRATEGIES)
        if unknown:
            raise ValueError(f"unknown strategies {sorted(unknown)}")

    def impact(self, name: str) -> np.ndarray:
        return np.asarray(dict(self.impacts)[name], dtype=float)

    def thresholds(self) -> np.ndarray:
        """Per-metric bounds for strict success (bottleneck term unbounded)."""
        t = self.tol
        return np.array([t, 3 * t, 4 * t, t, 3 * t, 2 * t, math.inf])


@dataclass(frozen=True)
class SlackState:
    """Calibration memory for due dates.

    ``ratio`` holds each job's baseline slack in units of its own workload,
    ``due_ratio`` the same for due-date change events. Due dates are always
    recomputed as ``t + clip(alpha * ratio * W, W, H - t)``.
    """

    alpha: float
    ratio: dict[int, float]
    due_ratio: dict[int, float] = field(default_factory=dict)

    @classmethod
    def from_stream(cls, stream: EventStream, alpha: float = 1.0) -> SlackState:
        ratio = {}
        work = {}
        for job in stream.jobs:
            w = job.work
            work[job.job_id] = (job.arrival, w)
            ratio[job.job_id] = (job.due - job.arrival) / w if w > 0 else 0.0
        due_ratio = {}
        for e in stream.events:
            if e.payload.kind is EventKind.DUE_DATE_CHANGE and e.payload.job_id in work:
                t, w = work[e.payload.job_id]
                due_ratio[e.payload.job_id] = (e.payload.due - t) / w if w > 0 else 0.0
        return cls(alpha, ratio, due_ratio)


@dataclass(frozen=True)
class Edit:
    stream: EventStream
    state: SlackState | None = None
    note: str = ""
    residual: float = 0.0


@dataclass(frozen=True)
class StepRecord:
    iteration: int
    strategy: str
    mode: str
    accepted: bool
    l2: float
    errors: tuple[float, ...]


@dataclass(frozen=True)
class CalibrationReport:
    iterations: int
    steps: tuple[StepRecord, ...]
    initial_l2: float
    final_l2: float
    final_errors: tuple[float, ...]
    relaxed: bool
    strict: bool
    wall_clock: float
    alpha: float
    stop_reason: str

    def as_dict(self) -> dict:
        return {
            "iterations": self.iterations,
            "steps": [
                {
                    "iteration": s.iteration,
                    "strategy": s.strategy,
                    "mode": s.mode,
                    "accepted": s.accepted,
                    "l2": s.l2,
                    "errors": list(s.errors),
                }
                for s in self.steps
            ],
            "initial_l2": self.initial_l2,
            "final_l2": self.final_l2,
            "final_errors": dict(zip(METRIC_KEYS, self.final_errors)),
            "relaxed": self.relaxed,
            "strict": self.strict,
            "wall_clock": self.wall_clock,
            "alpha": self.alpha,
            "stop_reason": self.stop_reason,
        }


# ---------------------------------------------------------------------------
# Errors and scoring
# ---------------------------------------------------------------------------


def target_vector(t: TargetMetrics) -> np.ndarray:
    return np.array([t.rho_global, t.c_a2, t.c_p2, t.tau, t.chi_load, t.delta, 0.0])


def relative_errors(obs, tgt, eps: float = 1e-6) -> np.ndarray:
    """Relative error per entry; absolute error where the target is zero."""
    obs = np.asarray(obs, float)
    tgt = np.asarray(tgt, float)
    diff = np.abs(obs - tgt)
    return np.where(np.abs(tgt) > 0, diff / (np.abs(tgt) + eps), diff)


def error_vector(m_obs, targets: TargetMetrics, eps: float = 1e-6) -> np.ndarray:
    """Normalized errors over (rho, c_a2, c_p2, tau, chi, delta, eps_bn)."""
    obs = m_obs.vector() if isinstance(m_obs, ObservedMetrics) else np.asarray(m_obs, float)
    return relative_errors(obs, target_vector(targets), eps)


def phi(a: float, e: float, cfg: CalibratorConfig) -> float:
    if a > 0:
        return a * e
    if a < 0:
        penalty = cfg.lambda_soft if e < cfg.tol else cfg.lambda_hard
        return -penalty * e * abs(a)
    return 0.0


def strategy_score(impact, e, cfg: CalibratorConfig) -> float:
    """Asymmetric benefit/penalty score of a strategy's impact vector."""
    return float(sum(phi(a, x, cfg) for a, x in zip(impact, e)))


def success_flags(e, l2: float, cfg: CalibratorConfig) -> tuple[bool, bool]:
    relaxed = bool(l2 <= cfg.tol)
    e = np.asarray(e, float)
    strict = relaxed and bool(np.all(e[:6] <= cfg.thresholds()[:6]))
    return relaxed, strict


# ---------------------------------------------------------------------------
# Stream surgery helpers
# ---------------------------------------------------------------------------


def _split(stream: EventStream):
    jobs: list[JobSpec] = []
    outages: list[Outage] = list(stream.outages)
    scenario: dict[int, list[tuple[float, object]]] = {}
    for e in stream.events:
        kind = e.payload.kind
        if kind is EventKind.JOB_ARRIVAL:
            jobs.append(e.payload.job)
        elif hasattr(e.payload, "job_id"):
            scenario.setdefault(e.payload.job_id, []).append((e.time, e.payload))
    return jobs, outages, scenario


def _assemble(stream: EventStream, jobs, outages, scenario) -> EventStream:
    events: list[tuple[float, object]] = [(j.arrival, JobArrival(j)) for j in jobs]
    events += outage_payloads(outages)
    alive = {j.job_id for j in jobs}
    for job_id, evs in scenario.items():
        if job_id in alive:
            events += evs
    return stream.rebuild(events)


def _due(arrival: float, ratio: float, work: float, alpha: float, horizon: float) -> float:
    slack = min(max(alpha * ratio * work, work), horizon - arrival)
    return arrival + max(slack, 0.0)


def _retime(jobs_old: dict[int, JobSpec], jobs_new, scenario, state: SlackState | None, horizon: float):
    """Recompute due dates and move scenario events with their jobs."""
    out_jobs = []
    out_scen: dict[int, list[tuple[float, object]]] = {}
    for job in jobs_new:
        old = jobs_old.get(job.job_id, job)
        if state is not None:
            ratio = state.ratio.get(job.job_id, (old.due - old.arrival) / old.work if old.work > 0 else 0.0)
            due = _due(job.arrival, ratio, job.work, state.alpha, horizon)
        else:
            due = min(job.arrival + (old.due - old.arrival), horizon)
        job = replace(job, due=due)
        out_jobs.append(job)
        evs = scenario.get(job.job_id)
        if not evs:
            continue
        span_old = old.due - old.arrival
        moved = []
        for t, payload in evs:
            frac = (t - old.arrival) / span_old if span_old > 0 else 0.0
            frac = min(max(frac, 0.0), 1.0)
            t_new = job.arrival + frac * (job.due - job.arrival)
            if payload.kind is EventKind.DUE_DATE_CHANGE:
                if state is not None and job.job_id in state.due_ratio:
                    target = job.arrival + min(
                        max(state.alpha * state.due_ratio[job.job_id] * job.work, 0.0), horizon - job.arrival
                    )
                else:
                    target = job.arrival + (payload.due - old.arrival)
                payload = DueDateChange(job.job_id, float(min(max(t_new, target), horizon)))
            moved.append((t_new, payload))
        out_scen[job.job_id] = moved
    return out_jobs, out_scen


# ---------------------------------------------------------------------------
# Arrival structure
# ---------------------------------------------------------------------------


def _arrival_units(jobs) -> list[int]:
    """Unit index per job; jobs sharing a timestamp form one arrival unit."""
    units = []
    k = -1
    prev = None
    for job in jobs:
        if prev is None or job.arrival != prev:
            k += 1
        units.append(k)
        prev = job.arrival
    return units


def renewal_times(stream: EventStream, jobs, c_a2: float, rng, candidates: int = 16) -> np.ndarray:
    """Fresh Gamma renewal timestamps for ``jobs`` (order preserved).

    Each of ``candidates`` draws is rescaled into ``[0, 0.999 H]`` (through
    the configured time warp) and the one whose realized inter-arrival SCV
    is closest to ``c_a2`` is returned.
    """
    H = stream.horizon
    d = stream.config.distri
    units = np.asarray(_arrival_units(jobs))
    n_units = int(units[-1]) + 1 if units.size else 0
    if n_units <= 1:
        return np.array([j.arrival for j in jobs])
    shape = 1.0 / c_a2 if c_a2 > 1e-6 else 1e6
    limit = float(cumulative_intensity(H, d.profile, d.amplitude, d.period, H))
    best, best_err = None, math.inf
    for _ in range(max(candidates, 1)):
        raw = np.cumsum(rng.gamma(shape, 1.0, size=n_units))
        raw *= ARRIVAL_SPAN * limit / raw[-1]
        times = warp_times(raw, d.profile, d.amplitude, d.period, H)[units]
        gaps = np.diff(times)
        m = gaps.mean()
        obs = gaps.var() / (m * m) if m > 0 else 0.0
        err = abs(obs - c_a2)
        if err < best_err:
            best, best_err = times, err
    return best


def _with_times(jobs, times):
    return [replace(j, arrival=float(t)) for j, t in zip(jobs, times)]


def _fresh_copies(jobs, sources, rng, horizon: float):
    next_id = max(j.job_id for j in jobs) + 1
    next_batch = max(j.batch for j in jobs) + 1
    spacing = horizon / max(len(jobs), 1)
    out = []
    for k, src in enumerate(sources):
        t = min(max(src.arrival + (rng.random() - 0.5) * spacing, 0.0), ARRIVAL_SPAN * horizon)
        out.append(replace(src, job_id=next_id + k, batch=next_batch + k, arrival=float(t)))
    return out


def _job_group_work(stream: EventStream, jobs) -> np.ndarray:
    group_ids, tpl_groups = _op_groups(stream.config.plant)
    G = np.zeros((len(jobs), len(group_ids)))
    for i, job in enumerate(jobs):
        np.add.at(G[i], tpl_groups[job.template], job.processing)
    return G


def rate_correction(stream: EventStream, targets: TargetMetrics, rng, *, cap: float = 0.10, candidates: int = 16):
    """Delete or duplicate ``round(min(e_rho, cap) * N)`` jobs.

    Among random candidate subsets the one whose total work is closest to
    the workload gap is used. Returns ``(jobs, sources_of_new_jobs)``.
    """
    jobs, _, _ = _split(stream)
    n = len(jobs)
    if n < 2:
        raise CalibrationError("rate correction needs at least two jobs")
    m = observed_metrics(stream)
    e_rho = relative_errors([m.rho_global], [targets.rho_global])[0]
    count = int(round(min(e_rho, cap) * n))
    if count == 0:
        return jobs, []
    capacity = stream.horizon * stream.config.plant.total_speed
    gap = abs(targets.rho_global - m.rho_global) * capacity
    works = np.array([j.work for j in jobs])
    best, best_err = None, math.inf
    for _ in range(max(candidates, 1)):
        pick = rng.choice(n, size=min(count, n), replace=False)
        err = abs(works[pick].sum() - gap)
        if err < best_err:
            best, best_err = pick, err
    if m.rho_global > targets.rho_global:
        if n - count < 2:
            raise CalibrationError("deletion would leave fewer than two jobs")
        drop = set(best.tolist())
        return [j for i, j in enumerate(jobs) if i not in drop], []
    sources = [jobs[i] for i in sorted(best.tolist())]
    return jobs, sources


def mix_correction(stream: EventStream, targets: TargetMetrics, *, cap: float = 0.10, eps: float = 1e-6):
    """Paired delete/duplicate swaps steering the group-load CV.

    Each swap removes one job and duplicates another, chosen exhaustively to
    minimize the combined relative error of load imbalance and utilization.
    Returns ``(jobs, sources_of_new_jobs)``.
    """
    jobs, _, _ = _split(stream)
    n = len(jobs)
    if n < 2:
        raise CalibrationError("mix correction needs at least two jobs")
    plant = stream.config.plant
    group_ids, _ = _op_groups(plant)
    cap_g = stream.horizon * np.array([plant.group_speed[g] for g in group_ids])
    cap_tot = stream.horizon * plant.total_speed
    G = _job_group_work(stream, jobs)
    loads = G.sum(axis=0)
    rows = G.copy()

    def objective(L):
        rho_g = L / cap_g
        mean = rho_g.mean(axis=-1)
        chi = np.where(mean > 0, rho_g.std(axis=-1) / np.where(mean > 0, mean, 1.0), 0.0)
        rho = L.sum(axis=-1) / cap_tot
        return relative_errors(chi, targets.chi_load, eps) + relative_errors(rho, targets.rho_global, eps)

    current = float(objective(loads))
    slots = [(i, False) for i in range(n)]  # (source job index, is duplicate)
    for _ in range(max(1, int(cap * n / 2))):
        diff = rows[None, :, :] - rows[:, None, :]  # [a, b]: drop slot a, copy slot b
        cand = objective(loads[None, None, :] + diff)
        np.fill_diagonal(cand, np.inf)
        a, b = np.unravel_index(int(np.argmin(cand)), cand.shape)
        if cand[a, b] >= current - 1e-12:
            break
        current = float(cand[a, b])
        loads = loads - rows[a] + rows[b]
        rows[a] = rows[b]
        slots[a] = (slots[b][0], True)
    kept = [jobs[i] for i, dup in slots if not dup]
    sources = [jobs[i] for i, dup in slots if dup]
    return kept, sources


def adjust_arrival_structure(
    stream: EventStream,
    targets: TargetMetrics,
    rng,
    *,
    mode: str | None = None,
    cap: float = 0.10,
    candidates: int = 16,
    state: SlackState | None = None,
    tol: float = 0.05,
) -> Edit:
    """Rate, mix or renewal correction of the arrival structure.

    ``mode`` of ``None`` picks rate correction when the utilization error
    dominates (at least twice the arrival-SCV error and above ``tol``),
    renewal resampling otherwise. Renewal resampling only moves timestamps;
    processing times and therefore total workload are untouched.
    """
    jobs_all, outages, scenario = _split(stream)
    if len(jobs_all) < 2:
        raise CalibrationError("arrival adjustment needs at least two jobs")
    if mode is None:
        e = error_vector(observed_metrics(stream), targets)
        mode = "rate" if e[0] >= 2 * e[1] and e[0] >= tol else "renewal"
    old = {j.job_id: j for j in jobs_all}
    H = stream.horizon
    if mode == "renewal":
        jobs = jobs_all
        new_jobs = []
    elif mode == "rate":
        jobs, sources = rate_correction(stream, targets, rng, cap=cap, candidates=candidates)
        new_jobs = _fresh_copies(jobs_all, sources, rng, H) if sources else []
    elif mode == "mix":
        jobs, sources = mix_correction(stream, targets, cap=cap)
        new_jobs = _fresh_copies(jobs_all, sources, rng, H) if sources else []
    else:
        raise ValueError(f"unknown arrival mode {mode!r}")

    if new_jobs and state is not None:
        ratio = dict(state.ratio)
        src_ids = iter(sources)
        for job in new_jobs:
            src = next(src_ids)
            ratio[job.job_id] = state.ratio.get(src.job_id, (src.due - src.arrival) / src.work)
        state = replace(state, ratio=ratio)
    for job in new_jobs:
        old[job.job_id] = job
    merged = sorted(jobs + new_jobs, key=lambda j: (j.arrival, j.job_id))
    times = renewal_times(stream, merged, targets.c_a2, rng, candidates)
    retimed = _with_times(merged, times)
    final, scen = _retime(old, retimed, scenario, state, H)
    return Edit(_assemble(stream, final, outages, scen), state, mode)


# ---------------------------------------------------------------------------
# Slack
# ---------------------------------------------------------------------------


def update_alpha(alpha: float, tau_obs: float, tau_target: float, eta: float = 0.5, eps: float = 1e-6) -> float:
    e_tau = relative_errors([tau_obs], [tau_target], eps)[0]
    new = alpha * (1.0 - eta * np.sign(tau_obs - tau_target) * e_tau)
    return float(min(max(new, ALPHA_MIN), ALPHA_MAX))


def apply_slack(stream: EventStream, alpha: float, state: SlackState | None = None) -> Edit:
    """Set ``D_j = t_j + clip(alpha * xi_j, W_j, H - t_j)``.

    ``xi_j`` is the baseline slack remembered in ``state`` (or the current
    slack when no state is given).
    """
    base = state if state is not None else SlackState.from_stream(stream)
    state2 = replace(base, alpha=alpha)
    jobs, outages, scenario = _split(stream)
    old = {j.job_id: j for j in jobs}
    final, scen = _retime(old, jobs, scenario, state2, stream.horizon)
    return Edit(_assemble(stream, final, outages, scen), state2, "slack")


def scale_slack(
    stream: EventStream, alpha: float, tau_target: float, state: SlackState | None = None, eta: float = 0.5
) -> Edit:
    """Update ``alpha`` from the current tightness error and rescale due dates."""
    tau_obs = observed_metrics(stream).tau
    return apply_slack(stream, update_alpha(alpha, tau_obs, tau_target, eta), state)


# ---------------------------------------------------------------------------
# Processing times
# ---------------------------------------------------------------------------


def per_op_scv(target: float, means) -> float:
    """Unit-mean multiplier SCV giving a pooled SCV of ``target``."""
    means = np.asarray(means, float)
    mean = means.mean()
    base = means.var() / (mean * mean) if mean > 0 else 0.0
    return max((1.0 + target) / (1.0 + base) - 1.0, 0.0)


def resample_processing_times(
    stream: EventStream,
    c_p2: float,
    rng,
    *,
    candidates: int = 16,
    conserve: str = "group",
    state: SlackState | None = None,
    max_retries: int = 8,
) -> Edit:
    """Redraw processing times and rescale to the original total workload.

    Fresh times are Gamma multiples of each operation's nominal mean with an
    SCV chosen so the pooled SCV matches ``c_p2``. They are rescaled so the
    sum over each machine group (``conserve="group"``) or over the whole
    stream (``"total"``) equals the original sum. The candidate with pooled
    SCV closest to the target is kept.
    """
    jobs, outages, scenario = _split(stream)
    plant = stream.config.plant
    tpl = plant.template_index
    group_ids, tpl_groups = _op_groups(plant)
    lengths = [len(j.processing) for j in jobs]
    if not jobs or sum(lengths) == 0:
        raise CalibrationError("no operations to resample")
    p = np.concatenate([np.asarray(j.processing, float) for j in jobs])
    mu = np.concatenate([[op.mean for op in tpl[j.template].operations] for j in jobs])
    if conserve == "group":
        gidx = np.concatenate([tpl_groups[j.template] for j in jobs])
    elif conserve == "total":
        gidx = np.zeros(p.size, dtype=np.intp)
    else:
        raise ValueError(f"unknown conserve mode {conserve!r}")
    ng = int(gidx.max()) + 1
    totals = np.bincount(gidx, weights=p, minlength=ng)
    s = per_op_scv(c_p2, mu)

    best, best_err = None, math.inf
    tries = 0
    while best is None or tries < candidates:
        tries += 1
        if tries > candidates + max_retries:
            raise CalibrationError("resampled processing times sum to zero")
        x = rng.gamma(1.0 / s, s, size=p.size) if s > 1e-12 else np.ones(p.size)
        tilde = mu * x
        sums = np.bincount(gidx, weights=tilde, minlength=ng)
        if np.any((sums <= 0) & (totals > 0)):
            continue
        factor = np.divide(totals, sums, out=np.zeros_like(totals), where=sums > 0)
        cand = tilde * factor[gidx]
        if np.any(cand <= 0):
            continue
        m = cand.mean()
        got = cand.var() / (m * m)
        err = abs(got - c_p2)
        if err < best_err:
            best, best_err = cand, err
        # Rescaling adds between-group spread; fold it back into the per-op SCV.
        if s > 1e-12:
            base = (1.0 + got) / (1.0 + s) - 1.0
            s = max((1.0 + c_p2) / (1.0 + base) - 1.0, 0.0)
    splits = np.split(best, np.cumsum(lengths)[:-1])
    new_jobs = [replace(j, processing=tuple(part.tolist())) for j, part in zip(jobs, splits)]
    old = {j.job_id: j for j in jobs}
    final, scen = _retime(old, new_jobs, scenario, state, stream.horizon)
    return Edit(_assemble(stream, final, outages, scen), state, "processing")


# ---------------------------------------------------------------------------
# Bottleneck windows and disturbance
# ---------------------------------------------------------------------------


def _subtract(outage: Outage, s: float, e: float) -> list[Outage]:
    if e <= outage.start or s >= outage.end:
        return [outage]
    out = []
    if outage.start < s:
        out.append(replace(outage, end=s))
    if e < outage.end:
        out.append(replace(outage, start=e))
    return out


def _remove_time(outages: list[Outage], machine: str, lo: float, hi: float, amount: float) -> float:
    """Remove up to ``amount`` of downtime on ``machine`` inside ``[lo, hi]``,
    latest first. Returns the amount actually removed."""
    mine = [o for o in outages if o.machine == machine]
    covered = merge_downtimes([(max(o.start, lo), min(o.end, hi)) for o in mine if o.end > lo and o.start < hi])
    removed = 0.0
    cuts = []
    for s, e in reversed(covered):
        if removed >= amount - 1e-12:
            break
        take = min(e - s, amount - removed)
        cuts.append((e - take, e))
        removed += take
    if cuts:
        kept = [o for o in outages if o.machine != machine]
        pieces = mine
        for s, e in cuts:
            pieces = [q for o in pieces for q in _subtract(o, s, e)]
        outages[:] = kept + [o for o in pieces if o.end - o.start > 1e-12]
    return removed


def _add_time(outages: list[Outage], machine: str, lo: float, hi: float, amount: float, rng, blocked=()) -> float:
    """Insert up to ``amount`` of new downtime in free time of ``[lo, hi]``."""
    added = 0.0
    while amount - added > 1e-12:
        busy = [(o.start, o.end) for o in outages if o.machine == machine] + list(blocked)
        spot = place_in_gaps(free_gaps(busy, lo, hi), amount - added, rng)
        if spot is None:
            break
        outages.append(Outage(machine, spot[0], spot[1]))
        added += spot[1] - spot[0]
    return added


def adjust_window_downtime(stream: EventStream, index: int, capacity_change: float, rng) -> Edit:
    """Change capacity loss inside bottleneck window ``index``.

    Every machine of the window's group gains (or loses) ``capacity_change /
    v_g`` time units of downtime inside the window. Shrinking stops at zero
    downtime; the unmet part is reported as ``residual`` in time units.
    """
    b = stream.config.targets.bottlenecks[index]
    plant = stream.config.plant
    members = plant.group_machines[b.group]
    if not members:
        raise CalibrationError("bottleneck group is empty")
    if capacity_change == 0:
        return Edit(stream, None, "bottleneck")
    jobs, outages, scenario = _split(stream)
    v_g = plant.group_speed[b.group]
    per_machine = abs(capacity_change) / v_g
    speeds = plant.speeds
    unmet = 0.0
    for m in members:
        if capacity_change > 0:
            done = _add_time(outages, m, b.start, b.end, per_machine, rng)
        else:
            done = _remove_time(outages, m, b.start, b.end, per_machine)
        unmet += speeds[m] * (per_machine - done)
    residual = unmet / v_g
    return Edit(_assemble(stream, jobs, outages, scenario), None, "bottleneck", residual)


def engineer_bottleneck(stream: EventStream, index: int, delta_rho: float, rng) -> Edit:
    """Move window ``index``'s utilization by ``delta_rho`` via its downtime."""
    if delta_rho == 0:
        return Edit(stream, None, "bottleneck")
    m = observed_metrics(stream)
    rho_b = m.rho_windows[index]
    b = stream.config.targets.bottlenecks[index]
    plant = stream.config.plant
    downs = {}
    for o in stream.outages:
        downs.setdefault(o.machine, []).append((o.start, o.end))
    c_eff = 0.0
    for mid in plant.group_machines[b.group]:
        iv = merge_downtimes(downs.get(mid, []))
        lost = sum(max(0.0, min(e, b.end) - max(s, b.start)) for s, e in iv)
        c_eff += plant.speeds[mid] * ((b.end - b.start) - lost)
    w_win = rho_b * c_eff
    new_rho = rho_b + delta_rho
    if new_rho <= 0:
        return Edit(stream, None, "bottleneck", residual=math.inf)
    return adjust_window_downtime(stream, index, c_eff - w_win / new_rho, rng)


def rebalance_disturbance(stream: EventStream, delta_target: float, rng) -> Edit:
    """Add or trim downtime outside bottleneck windows to hit ``delta_target``."""
    m = observed_metrics(stream)
    plant = stream.config.plant
    H = stream.horizon
    capacity = H * plant.total_speed
    gap = (delta_target - m.delta) * capacity
    if abs(gap) <= 1e-9 * capacity:
        return Edit(stream, None, "disturbance")
    jobs, outages, scenario = _split(stream)
    protected: dict[str, list[tuple[float, float]]] = {}
    for b in stream.config.targets.bottlenecks:
        for mid in plant.group_machines[b.group]:
            protected.setdefault(mid, []).append((b.start, b.end))
    machines = [mm.id for mm in plant.machines]
    speeds = plant.speeds
    remaining = abs(gap)
    order = list(rng.permutation(len(machines)))
    if gap > 0:
        mean_len = stream.config.distri.repair_mean
        full = set()
        guard = 0
        while remaining > 1e-9 * capacity and len(full) < len(machines) and guard < 10000:
            guard += 1
            mid = machines[int(rng.integers(len(machines)))]
            if mid in full:
                continue
            want = min(rng.exponential(mean_len), remaining / speeds[mid])
            got = _add_time(outages, mid, 0.0, H, want, rng, blocked=protected.get(mid, ()))
            if got <= 1e-12:
                full.add(mid)
            remaining -= speeds[mid] * got
    else:
        for k in order:
            mid = machines[k]
            if remaining <= 1e-9 * capacity:
                break
            free = free_gaps(protected.get(mid, []), 0.0, H)
            for lo, hi in free:
                if remaining <= 1e-9 * capacity:
                    break
                got = _remove_time(outages, mid, lo, hi, remaining / speeds[mid])
                remaining -= speeds[mid] * got
    residual = remaining / capacity
    return Edit(_assemble(stream, jobs, outages, scenario), None, "disturbance", residual)


def bottleneck_step(stream: EventStream, targets: TargetMetrics, rng) -> Edit:
    m = observed_metrics(stream)
    out = stream
    for i, b in enumerate(targets.bottlenecks):
        out = engineer_bottleneck(out, i, b.rho - m.rho_windows[i], rng).stream
    out = rebalance_disturbance(out, targets.delta, rng).stream
    return Edit(out, None, "bottleneck")


# ---------------------------------------------------------------------------
# Greedy loop
# ---------------------------------------------------------------------------


def _arrival_modes(e: np.ndarray, n_jobs: int, cfg: CalibratorConfig) -> list[str]:
    modes = []
    if e[0] >= 2 * e[1] and e[0] >= cfg.tol:
        modes.append("rate")
    rest = [("renewal", e[1]), ("mix", e[4])]
    if "rate" not in modes and e[0] * n_jobs >= 0.5:
        rest.append(("rate", e[0]))
    rest.sort(key=lambda kv: -kv[1])
    modes += [name for name, _ in rest]
    return modes


def _attempt(name: str, mode: str, stream, state, targets, rng, cfg) -> Edit:
    if name == "arrival":
        return adjust_arrival_structure(
            stream, targets, rng, mode=mode, cap=cfg.job_cap, candidates=cfg.candidates, state=state, tol=cfg.tol
        )
    if name == "slack":
        edit = scale_slack(stream, state.alpha, targets.tau, state, cfg.eta_tau)
        return edit
    if name == "processing":
        return resample_processing_times(stream, targets.c_p2, rng, candidates=cfg.candidates, state=state)
    if name == "bottleneck":
        edit = bottleneck_step(stream, targets, rng)
        return Edit(edit.stream, state, "bottleneck")
    raise ValueError(name)


def calibrate(stream: EventStream, cfg: CalibratorConfig = CalibratorConfig()) -> tuple[EventStream, CalibrationReport]:
    """Greedy event-space calibration; returns the best stream and a report."""
    start = time.perf_counter()
    targets = cfg.targets if cfg.targets is not None else stream.config.targets
    stream = EventStream(stream.events, stream.horizon, replace(stream.config, targets=targets))
    state = SlackState.from_stream(stream)
    e = error_vector(observed_metrics(stream), targets, cfg.eps)
    l2 = float(np.linalg.norm(e))
    initial = l2
    steps: list[StepRecord] = []
    enabled = [s for s in STRATEGIES if s not in cfg.disabled]
    iteration = 0
    reason = "iteration cap"
    while iteration < cfg.max_iter:
        if e.max() < cfg.tol and l2 <= cfg.tol:
            reason = "within tolerance"
            break
        iteration += 1
        scored = sorted(
            enabled, key=lambda s: (-strategy_score(cfg.impact(s), e, cfg), STRATEGIES.index(s))
        )
        accepted = False
        for name in scored:
            modes = _arrival_modes(e, len(stream.jobs), cfg) if name == "arrival" else [name]
            for mode in modes:
                rng = np.random.default_rng(derive_seed(cfg.seed, "calibrator", iteration, name, mode))
                try:
                    edit = _attempt(name, mode, stream, state, targets, rng, cfg)
                except CalibrationError:
                    continue
                e2 = error_vector(observed_metrics(edit.stream), targets, cfg.eps)
                l2_new = float(np.linalg.norm(e2))
                ok = l2_new < l2
                steps.append(StepRecord(iteration, name, mode, ok, l2_new, tuple(e2.tolist())))
                if ok:
                    stream, e, l2 = edit.stream, e2, l2_new
                    state = edit.state if edit.state is not None else state
                    accepted = True
                    break
            if accepted:
                break
        if not accepted:
            reason = "no improving strategy"
            break
    else:
        if e.max() < cfg.tol and l2 <= cfg.tol:
            reason = "within tolerance"
    relaxed, strict = success_flags(e, l2, cfg)
    report = CalibrationReport(
        iterations=iteration,
        steps=tuple(steps),
        initial_l2=initial,
        final_l2=l2,
        final_errors=tuple(e.tolist()),
        relaxed=relaxed,
        strict=strict,
        wall_clock=time.perf_counter() - start,
        alpha=state.alpha,
        stop_reason=reason,
    )
    return stream, report
