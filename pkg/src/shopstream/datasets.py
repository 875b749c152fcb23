"""Reference plant, parameter grids, sweeps, scale levels and dynamic presets."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, replace

import numpy as np

from .model import (
    DistributionParams,
    DynamicScenario,
    InputConfig,
    Machine,
    MachineGroup,
    PlantSpec,
    ProcessTemplate,
    TargetMetrics,
    TemplateOp,
    derive_seed,
)

GRID_LEVELS = {
    "rho_global": (0.50, 0.65, 0.80, 0.90, 0.95),
    "tau": (2.0, 4.0, 6.0, 8.0, 10.0),
    "c_a2": (0.25, 0.5, 1.0, 2.0, 4.0),
    "c_p2": (0.25, 0.5, 1.0, 2.0),
    "delta": (0.0, 0.05, 0.10, 0.15),
    "chi_load": (0.0, 0.15, 0.30),
}
GRID_SEEDS = 5

CENTROID = {"rho_global": 0.85, "tau": 5.0, "c_a2": 1.0, "c_p2": 0.5, "delta": 0.05, "chi_load": 0.1}

SCALE_LEVELS = {
    "small": (200, 1107.5),
    "medium": (400, 2214.9),
    "large": (800, 4429.9),
    "extra-large": (1600, 8859.7),
}

DESK_JOBS = 200


def _template(tid: str, ops: list[tuple[str, float]]) -> ProcessTemplate:
    return ProcessTemplate(tid, tuple(TemplateOp(f"{tid}-o{k + 1}", g, mu) for k, (g, mu) in enumerate(ops)))


def reference_plant() -> PlantSpec:
    """Ten machines in four groups with three four-operation templates.

    Template F1 loads groups G1/G2 twice as heavily (per unit of group
    speed) as G3/G4, F2 the reverse, and F3 is balanced, so the job mix
    controls load imbalance across roughly [0, 1/3].
    """
    speeds = (1.2, 0.8, 1.0, 1.0, 1.0, 1.25, 0.75, 1.0, 1.0, 1.0)
    machines = tuple(Machine(f"M{i + 1}", v) for i, v in enumerate(speeds))
    groups = (
        MachineGroup("G1", ("M1", "M2", "M3")),
        MachineGroup("G2", ("M4", "M5")),
        MachineGroup("G3", ("M6", "M7", "M8")),
        MachineGroup("G4", ("M9", "M10")),
    )
    templates = (
        _template("F1", [("G1", 18.0), ("G2", 12.0), ("G3", 9.0), ("G4", 6.0)]),
        _template("F2", [("G3", 18.0), ("G4", 12.0), ("G1", 9.0), ("G2", 6.0)]),
        _template("F3", [("G2", 9.0), ("G1", 13.5), ("G4", 9.0), ("G3", 13.5)]),
    )
    return PlantSpec(machines, groups, templates, (0.55, 0.15, 0.30))


def horizon_for(plant: PlantSpec, rho: float, n_jobs: int) -> float:
    """Horizon whose expected job count at utilization ``rho`` is ``n_jobs``."""
    return n_jobs * plant.mean_work() / (rho * plant.total_speed)


def make_config(
    levels: dict,
    *,
    seed: int = 0,
    plant: PlantSpec | None = None,
    n_jobs: int = DESK_JOBS,
    dyn: DynamicScenario | None = None,
    distri: DistributionParams | None = None,
    bottlenecks=(),
) -> InputConfig:
    """Fixed-count configuration for a dictionary of target levels."""
    plant = plant or reference_plant()
    lv = {**CENTROID, **levels}
    H = horizon_for(plant, lv["rho_global"], n_jobs)
    targets = TargetMetrics(
        rho_global=lv["rho_global"],
        c_a2=lv["c_a2"],
        c_p2=lv["c_p2"],
        tau=lv["tau"],
        chi_load=lv["chi_load"],
        delta=lv["delta"],
        bottlenecks=tuple(bottlenecks),
    )
    return InputConfig(
        plant=plant,
        distri=distri or DistributionParams(),
        targets=targets,
        dyn=dyn or DynamicScenario(),
        horizon=round(H, 6),
        n_jobs_fixed=n_jobs,
        seed=seed,
    )


@dataclass(frozen=True)
class Scenario:
    name: str
    levels: dict

    def config(self, seed: int, **kwargs) -> InputConfig:
        return make_config(self.levels, seed=derive_seed(seed, self.name), **kwargs)


def grid_cells(levels: dict | None = None) -> list[dict]:
    """Cartesian product of the level lists, in key order."""
    levels = GRID_LEVELS if levels is None else levels
    keys = list(levels)
    return [dict(zip(keys, combo)) for combo in itertools.product(*(levels[k] for k in keys))]


def cell_name(levels: dict) -> str:
    return "_".join(f"{k}={levels[k]:g}" for k in sorted(levels))


def desk_grid(n: int = 30, seed: int = 2024) -> list[Scenario]:
    """A seeded random subset of the full factorial grid."""
    cells = grid_cells()
    rng = np.random.default_rng(derive_seed(seed, "desk-grid"))
    pick = sorted(rng.choice(len(cells), size=n, replace=False).tolist())
    return [Scenario(cell_name(cells[i]), cells[i]) for i in pick]


def sweep_values(name: str) -> np.ndarray:
    """Points of a one-parameter sweep around the centroid."""
    if name == "rho_global":
        return np.round(np.arange(30) * 0.02 + 0.4, 10)
    if name in ("c_a2", "c_p2", "variability"):
        return np.round(np.geomspace(0.1, 5.0, 20), 10)
    if name == "tau":
        return np.round(np.arange(22) * 0.5 + 1.5, 10)
    if name == "delta":
        return np.round(np.arange(26) * 0.01, 10)
    raise ValueError(f"no sweep defined for {name!r}")


SWEEP_DIMENSIONS = ("rho_global", "variability", "c_a2", "c_p2", "tau", "delta")


def _levels(dim: str, value: float) -> dict:
    if dim == "variability":
        return {"c_a2": value, "c_p2": value}
    return {dim: value}


def sweep(dimensions) -> list[Scenario]:
    """Centroid-anchored sweeps; two dimensions give their product."""
    dims = list(dimensions)
    if not dims:
        raise ValueError("at least one sweep dimension is required")
    if len(dims) > 2:
        raise ValueError("at most two sweep dimensions")
    axes = [sweep_values(d) for d in dims]
    out = []
    for combo in itertools.product(*axes):
        levels = {}
        for d, v in zip(dims, combo):
            levels.update(_levels(d, float(v)))
        out.append(Scenario(cell_name(levels), levels))
    return out


def scale_config(level: str | tuple[int, float], seed: int = 0, plant: PlantSpec | None = None) -> InputConfig:
    """Fixed-count configuration at one of the named scale levels."""
    if isinstance(level, str):
        if level not in SCALE_LEVELS:
            raise ValueError(f"unknown scale level {level!r}; expected one of {sorted(SCALE_LEVELS)}")
        n, H = SCALE_LEVELS[level]
    else:
        n, H = level
    plant = plant or reference_plant()
    rho = n * plant.mean_work() / (H * plant.total_speed)
    cfg = make_config({"rho_global": rho}, seed=seed, plant=plant, n_jobs=n)
    return replace(cfg, horizon=float(H))


def dynamic_scenario(name: str, horizon: float) -> tuple[DynamicScenario, DistributionParams, float]:
    """Dynamic mechanisms of a named preset.

    Every preset uses periodic arrivals (amplitude 0.5, period H/3). Returns
    ``(dyn, distri, delta_target)``.
    """
    distri = DistributionParams(profile="periodic", amplitude=0.5, period=horizon / 3.0)
    pm_interval = horizon / 8.0
    if name == "baseline-static":
        return DynamicScenario(), distri, 0.0
    if name == "batch-only":
        return DynamicScenario(p_batch=0.10), replace(distri, batch_mean=3.0), 0.0
    if name == "pm-only":
        # Target the expected maintenance share so no extra breakdowns are added.
        return DynamicScenario(pm_interval=pm_interval), distri, distri.pm_mean / pm_interval
    if name == "route-only":
        return DynamicScenario(p_route=0.01), distri, 0.0
    if name == "full-complexity":
        dyn = DynamicScenario(
            p_cancel=0.02,
            p_rework=0.01,
            p_prio=0.10,
            p_route=0.01,
            p_dd_chg=0.02,
            p_batch=0.10,
            p_ptime=0.05,
            pm_interval=pm_interval,
            ptime_multipliers=(0.7, 0.9, 1.2, 1.5),
            due_tightening=0.5,
        )
        return dyn, replace(distri, batch_mean=3.0), 0.10
    raise ValueError(f"unknown dynamic scenario {name!r}")


DYNAMIC_SCENARIOS = ("baseline-static", "batch-only", "pm-only", "route-only", "full-complexity")


def dynamic_config(name: str, seed: int = 0, level: str = "small") -> InputConfig:
    cfg = scale_config(level, seed=seed)
    dyn, distri, delta = dynamic_scenario(name, cfg.horizon)
    return replace(cfg, dyn=dyn, distri=distri, targets=replace(cfg.targets, delta=delta))
