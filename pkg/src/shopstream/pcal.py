"""Parameter-space calibration: decision-vector decoding and NSGA-II search."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from .generator import arrival_gamma, compute_base_rate, generate_instance, gamma_shape
from .metrics import observed_metrics
from .model import EventStream, InputConfig, TargetMetrics, derive_seed, derive_stream
from .sesc import relative_errors, target_vector

PENALTY = 1e6
SCV_CAP = 5.0
TAU_RANGE = (0.5, 10.0)
RHO_B_RANGE = (0.01, 0.99)

MOO_DIMENSIONS = (
    "arrival_rate",
    "arrival_scv",
    "processing_scv",
    "due_date_tightness",
    "arrival_shape_bias",
    "processing_shape_bias",
    "breakdown",
    "routing_balance",
    "batch",
    "wip",
    "mix_exponent",
    "bottleneck",
)
MOO_BOUNDS = (
    (0.25, 4.0),
    (0.25, 4.0),
    (0.25, 4.0),
    (0.25, 4.0),
    (-1.0, 1.0),
    (-1.0, 1.0),
    (0.0, 2.0),
    (0.0, 2.0),
    (0.0, 2.0),
    (0.0, 2.0),
    (0.25, 4.0),
    (0.0, 2.0),
)
HYBRID_DIMENSIONS = ("arrival_scv", "processing_scv", "due_date_tightness", "bottleneck", "mix_exponent")
HYBRID_BOUNDS = ((0.25, 4.0), (0.25, 4.0), (0.25, 4.0), (0.0, 2.0), (0.25, 4.0))


@dataclass(frozen=True)
class MooConfig:
    mode: str = "moo-12d"
    bounds: tuple[tuple[float, float], ...] | None = None
    population: int | None = None
    generations: int = 40
    eta_c: float = 15.0
    eta_m: float = 20.0
    p_crossover: float = 0.9
    p_mutation: float | None = None
    tolerances: tuple[float, ...] | None = None
    tol: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("moo-12d", "hybrid-5d"):
            raise ValueError(f"unknown mode {self.mode!r}")
        pop = self.pop_size
        if pop < 4 or pop % 2:
            raise ValueError("population must be even and at least 4")
        if any(not lo < hi for lo, hi in self.search_bounds):
            raise ValueError("every lower bound must be below its upper bound")

    @property
    def search_bounds(self) -> tuple[tuple[float, float], ...]:
        if self.bounds is not None:
            return self.bounds
        return MOO_BOUNDS if self.mode == "moo-12d" else HYBRID_BOUNDS

    @property
    def pop_size(self) -> int:
        if self.population is not None:
            return self.population
        return 60 if self.mode == "moo-12d" else 100

    @property
    def dim(self) -> int:
        return len(self.search_bounds)

    def thresholds(self) -> np.ndarray:
        if self.tolerances is not None:
            return np.asarray(self.tolerances, float)
        t = self.tol
        return np.array([t, 3 * t, 4 * t, t, 3 * t, 2 * t, math.inf])


def identity_vector(mode: str = "moo-12d") -> np.ndarray:
    """Decision vector that leaves the base configuration unchanged."""
    if mode == "moo-12d":
        x = np.ones(12)
        x[4] = x[5] = 0.0
        return x
    return np.ones(5)


def _check_bounds(x: np.ndarray, bounds) -> None:
    lo = np.array([b[0] for b in bounds])
    hi = np.array([b[1] for b in bounds])
    if x.shape != lo.shape:
        raise ValueError(f"expected {lo.size} decision variables, got {x.size}")
    bad = np.flatnonzero((x < lo - 1e-12) | (x > hi + 1e-12))
    if bad.size:
        i = int(bad[0])
        raise ValueError(f"component x{i}={x[i]:g} outside [{lo[i]:g}, {hi[i]:g}]")


def _mix(weights, exponent: float) -> tuple[float, ...]:
    if exponent == 1.0:
        return tuple(weights)
    w = np.asarray(weights, float) ** exponent
    w = np.where(np.asarray(weights) > 0, w, 0.0)
    w = w / w.sum()
    w[-1] = 1.0 - w[:-1].sum()
    return tuple(float(v) for v in w)


def _scale_bottlenecks(t: TargetMetrics, factor: float) -> TargetMetrics:
    lo, hi = RHO_B_RANGE
    return replace(
        t, bottlenecks=tuple(replace(b, rho=min(max(b.rho * factor, lo), hi)) for b in t.bottlenecks)
    )


def decode(x, base: InputConfig, mode: str = "moo-12d") -> InputConfig:
    """Apply a decision vector to ``base`` and return the generation config.

    The returned config's targets carry the *generation knobs* (tightness,
    disturbance, bottleneck levels, processing SCV); objectives are always
    measured against the base targets.
    """
    x = np.asarray(x, dtype=float)
    t = base.targets
    d = base.distri
    if mode == "moo-12d":
        _check_bounds(x, MOO_BOUNDS)
        c_a2 = min(t.c_a2 * x[1], SCV_CAP)
        c_p2 = min(t.c_p2 * x[2], SCV_CAP)
        tau = min(max(t.tau * x[3], TAU_RANGE[0]), TAU_RANGE[1])
        k_a = float(gamma_shape(c_a2) * 2.0 ** x[4])
        k_p = float(gamma_shape(c_p2) * 2.0 ** x[5])
        delta = min(t.delta * x[6], 0.95)
        # x[7] is a reserved routing-balance dimension with no effect.
        # At zero bias the base shapes (usually unset, i.e. derived from the
        # targets) are kept as they are.
        shape_a = d.arrival_shape if x[4] == 0 else k_a
        shape_p = d.processing_shape if x[5] == 0 else k_p
        n_fixed = base.n_jobs_fixed
        theta_a = d.arrival_scale
        if n_fixed is not None:
            n_fixed = max(1, int(round(n_fixed * x[0])))
        elif x[0] != 1.0 or x[4] != 0.0:
            k = shape_a if shape_a is not None else gamma_shape(c_a2)
            theta_a = 1.0 / (k * compute_base_rate(base) * x[0])
        distri = replace(
            d,
            arrival_shape=shape_a,
            arrival_scale=theta_a,
            processing_shape=shape_p,
            batch_mean=float(d.batch_mean * x[8]),
            initial_wip=int(round(d.initial_wip * x[9])),
        )
        plant = replace(base.plant, job_mix=_mix(base.plant.job_mix, x[10]))
        targets = _scale_bottlenecks(replace(t, c_a2=c_a2, c_p2=c_p2, tau=tau, delta=delta), x[11])
        return replace(base, plant=plant, distri=distri, targets=targets, n_jobs_fixed=n_fixed)
    if mode == "hybrid-5d":
        _check_bounds(x, HYBRID_BOUNDS)
        c_a2 = min(t.c_a2 * x[0], SCV_CAP)
        c_p2 = min(t.c_p2 * x[1], SCV_CAP)
        tau = min(max(t.tau * x[2], TAU_RANGE[0]), TAU_RANGE[1])
        plant = replace(base.plant, job_mix=_mix(base.plant.job_mix, x[4]))
        targets = _scale_bottlenecks(replace(t, c_a2=c_a2, c_p2=c_p2, tau=tau), x[3])
        return replace(base, plant=plant, targets=targets)
    raise ValueError(f"unknown mode {mode!r}")


def objectives_for(stream: EventStream, targets: TargetMetrics, eps: float = 1e-6) -> np.ndarray:
    return relative_errors(observed_metrics(stream).vector(), target_vector(targets), eps)


def evaluate_objectives(x, base: InputConfig, seed: int, mode: str = "moo-12d", return_stream: bool = False):
    """Generate from the decoded config and return normalized errors.

    Any failure during decoding or generation yields the penalty ``1e6`` in
    every objective.
    """
    try:
        cfg = replace(decode(x, base, mode), seed=int(seed))
        stream = generate_instance(cfg)
        f = objectives_for(stream, base.targets)
        if not np.all(np.isfinite(f)):
            raise ValueError("non-finite objective")
    except (ValueError, ZeroDivisionError, FloatingPointError, KeyError):
        f = np.full(7, PENALTY)
        stream = None
    return (f, stream) if return_stream else f


# ---------------------------------------------------------------------------
# NSGA-II
# ---------------------------------------------------------------------------


def dominates(a, b) -> bool:
    a = np.asarray(a)
    b = np.asarray(b)
    return bool(np.all(a <= b) and np.any(a < b))


def _dominance(F: np.ndarray) -> np.ndarray:
    """``dom[i, j]`` is true when row ``i`` dominates row ``j``."""
    le = np.all(F[:, None, :] <= F[None, :, :], axis=2)
    return le & ~le.T


def nondominated_mask(F) -> np.ndarray:
    F = np.asarray(F, float)
    return ~_dominance(F).any(axis=0)


def nondominated_sort(F) -> list[np.ndarray]:
    """Pareto fronts as index arrays, best first."""
    F = np.asarray(F, float)
    n = F.shape[0]
    if n == 0:
        return []
    dom = _dominance(F)
    count = dom.sum(axis=0)
    fronts = []
    current = np.flatnonzero(count == 0)
    assigned = np.zeros(n, bool)
    while current.size:
        fronts.append(current)
        assigned[current] = True
        count = count - dom[current].sum(axis=0)
        current = np.flatnonzero((count == 0) & ~assigned)
    return fronts


def crowding_distance(F) -> np.ndarray:
    F = np.asarray(F, float)
    n, k = F.shape
    dist = np.zeros(n)
    if n <= 2:
        return np.full(n, math.inf)
    for j in range(k):
        order = np.argsort(F[:, j], kind="stable")
        lo, hi = F[order[0], j], F[order[-1], j]
        dist[order[0]] = dist[order[-1]] = math.inf
        if hi - lo <= 0:
            continue
        dist[order[1:-1]] += (F[order[2:], j] - F[order[:-2], j]) / (hi - lo)
    return dist


def rank_and_crowding(F) -> tuple[np.ndarray, np.ndarray]:
    F = np.asarray(F, float)
    rank = np.zeros(F.shape[0], int)
    crowd = np.zeros(F.shape[0])
    for r, front in enumerate(nondominated_sort(F)):
        rank[front] = r
        crowd[front] = crowding_distance(F[front])
    return rank, crowd


def sbx(p1, p2, lo, hi, eta: float, rng) -> tuple[np.ndarray, np.ndarray]:
    """Bounded simulated binary crossover."""
    c1, c2 = p1.copy(), p2.copy()
    for i in range(p1.size):
        if rng.random() > 0.5 or abs(p1[i] - p2[i]) < 1e-14:
            continue
        y1, y2 = min(p1[i], p2[i]), max(p1[i], p2[i])
        span = y2 - y1
        u = rng.random()
        children = []
        for beta in (1.0 + 2.0 * (y1 - lo[i]) / span, 1.0 + 2.0 * (hi[i] - y2) / span):
            alpha = 2.0 - beta ** -(eta + 1.0)
            if u <= 1.0 / alpha:
                betaq = (u * alpha) ** (1.0 / (eta + 1.0))
            else:
                betaq = (1.0 / (2.0 - u * alpha)) ** (1.0 / (eta + 1.0))
            children.append(betaq)
        a = 0.5 * ((y1 + y2) - children[0] * span)
        b = 0.5 * ((y1 + y2) + children[1] * span)
        a, b = min(max(a, lo[i]), hi[i]), min(max(b, lo[i]), hi[i])
        if rng.random() < 0.5:
            a, b = b, a
        c1[i], c2[i] = a, b
    return c1, c2


def polynomial_mutation(x, lo, hi, eta: float, prob: float, rng) -> np.ndarray:
    y = x.copy()
    for i in range(x.size):
        if rng.random() >= prob:
            continue
        span = hi[i] - lo[i]
        d1 = (y[i] - lo[i]) / span
        d2 = (hi[i] - y[i]) / span
        u = rng.random()
        p = 1.0 / (eta + 1.0)
        if u < 0.5:
            val = 2.0 * u + (1.0 - 2.0 * u) * (1.0 - d1) ** (eta + 1.0)
            dq = val**p - 1.0
        else:
            val = 2.0 * (1.0 - u) + 2.0 * (u - 0.5) * (1.0 - d2) ** (eta + 1.0)
            dq = 1.0 - val**p
        y[i] = min(max(y[i] + dq * span, lo[i]), hi[i])
    return y


@dataclass(frozen=True)
class Archive:
    """Nondominated decision vectors and their objectives."""

    X: np.ndarray
    F: np.ndarray
    seeds: tuple[int, ...] = ()
    evaluations: int = 0

    def __len__(self) -> int:
        return self.F.shape[0]


def _merge_archive(X_a, F_a, S_a, X, F, S):
    X_all = np.vstack([X_a, X]) if X_a.size else X
    F_all = np.vstack([F_a, F]) if F_a.size else F
    S_all = list(S_a) + list(S)
    front = np.flatnonzero(nondominated_mask(F_all))
    # Drop exact objective duplicates, keeping the earliest.
    _, first = np.unique(F_all[front], axis=0, return_index=True)
    keep = front[np.sort(first)]
    return X_all[keep], F_all[keep], [S_all[i] for i in keep]


def nsga2(
    objective: Callable[[np.ndarray, int, int], np.ndarray],
    bounds,
    cfg: MooConfig,
    initial=None,
    callback: Callable[[int, Archive], None] | None = None,
) -> Archive:
    """Elitist NSGA-II with an external nondominated archive.

    ``objective(x, generation, index)`` must return the objective vector;
    the pair ``(generation, index)`` lets callers derive per-candidate seeds.
    """
    rng = derive_stream(cfg.seed, "moo")
    lo = np.array([b[0] for b in bounds], float)
    hi = np.array([b[1] for b in bounds], float)
    d = lo.size
    pop = cfg.pop_size
    p_mut = cfg.p_mutation if cfg.p_mutation is not None else 1.0 / d

    X = lo + rng.random((pop, d)) * (hi - lo)
    if initial is not None:
        init = np.atleast_2d(np.asarray(initial, float))
        X[: init.shape[0]] = np.clip(init, lo, hi)
    F = np.array([objective(X[i], 0, i) for i in range(pop)])
    S = [(0, i) for i in range(pop)]
    evals = pop
    AX, AF, AS = _merge_archive(np.empty((0, d)), np.empty((0, F.shape[1])), [], X, F, S)
    if callback:
        callback(0, Archive(AX, AF, tuple(AS), evals))
    rank, crowd = rank_and_crowding(F)

    def tournament():
        i, j = rng.integers(pop, size=2)
        if rank[i] != rank[j]:
            return i if rank[i] < rank[j] else j
        if crowd[i] != crowd[j]:
            return i if crowd[i] > crowd[j] else j
        return min(i, j)

    for gen in range(1, cfg.generations):
        kids = []
        while len(kids) < pop:
            a, b = X[tournament()], X[tournament()]
            if rng.random() < cfg.p_crossover:
                c1, c2 = sbx(a, b, lo, hi, cfg.eta_c, rng)
            else:
                c1, c2 = a.copy(), b.copy()
            kids.append(polynomial_mutation(c1, lo, hi, cfg.eta_m, p_mut, rng))
            kids.append(polynomial_mutation(c2, lo, hi, cfg.eta_m, p_mut, rng))
        Xc = np.array(kids[:pop])
        Fc = np.array([objective(Xc[i], gen, i) for i in range(pop)])
        Sc = [(gen, i) for i in range(pop)]
        evals += pop
        AX, AF, AS = _merge_archive(AX, AF, AS, Xc, Fc, Sc)

        XU = np.vstack([X, Xc])
        FU = np.vstack([F, Fc])
        r, c = rank_and_crowding(FU)
        order = np.lexsort((-c, r))[:pop]
        X, F = XU[order], FU[order]
        rank, crowd = r[order], c[order]
        if callback:
            callback(gen, Archive(AX, AF, tuple(AS), evals))
    return Archive(AX, AF, tuple(AS), evals)


def select_solution(F, thresholds) -> int:
    """Index maximizing the count of satisfied objectives, then minimizing
    their sum; ties go to the lowest index."""
    F = np.asarray(F, float)
    if F.ndim != 2 or F.shape[0] == 0:
        raise ValueError("empty archive")
    n_sat = (F <= np.asarray(thresholds, float)).sum(axis=1)
    total = F.sum(axis=1)
    order = np.lexsort((np.arange(F.shape[0]), total, -n_sat))
    return int(order[0])


def hypervolume_2d(F, ref) -> float:
    """Dominated area of a 2-objective minimization front below ``ref``."""
    F = np.asarray(F, float)
    F = F[np.all(F < np.asarray(ref), axis=1)]
    if F.size == 0:
        return 0.0
    F = F[np.argsort(F[:, 0])]
    area, best_y = 0.0, ref[1]
    for x, y in F:
        if y < best_y:
            area += (ref[0] - x) * (best_y - y)
            best_y = y
    return float(area)


# ---------------------------------------------------------------------------
# Calibration driver
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ParameterCalibration:
    x: np.ndarray
    objectives: np.ndarray
    stream: EventStream
    archive: Archive
    l2: float
    wall_clock: float
    seed: int


def calibrate_parameters(base: InputConfig, cfg: MooConfig = MooConfig()) -> ParameterCalibration:
    """Run NSGA-II over decision vectors for ``base`` and pick one solution.

    For hybrid mode the base configuration is the constructor: its
    utilization and disturbance targets drive generation unchanged.
    """
    start = time.perf_counter()
    mode = cfg.mode

    def objective(x, gen, idx):
        return evaluate_objectives(x, base, derive_seed(cfg.seed, "moo", gen, idx), mode)

    archive = nsga2(objective, cfg.search_bounds, cfg, initial=identity_vector(mode))
    best = select_solution(archive.F, cfg.thresholds())
    gen, idx = archive.seeds[best]
    seed = derive_seed(cfg.seed, "moo", gen, idx)
    f, stream = evaluate_objectives(archive.X[best], base, seed, mode, return_stream=True)
    return ParameterCalibration(
        x=archive.X[best],
        objectives=f,
        stream=stream,
        archive=archive,
        l2=float(np.linalg.norm(f)),
        wall_clock=time.perf_counter() - start,
        seed=seed,
    )


__all__ = [
    "MooConfig",
    "Archive",
    "ParameterCalibration",
    "calibrate_parameters",
    "crowding_distance",
    "decode",
    "dominates",
    "evaluate_objectives",
    "hypervolume_2d",
    "identity_vector",
    "nondominated_mask",
    "nondominated_sort",
    "nsga2",
    "polynomial_mutation",
    "sbx",
    "select_solution",
]
