from __future__ import annotations

import pytest

from shopstream.datasets import make_config, reference_plant
from shopstream.model import (
    DistributionParams,
    DynamicScenario,
    InputConfig,
    Machine,
    MachineGroup,
    PlantSpec,
    ProcessTemplate,
    TargetMetrics,
    TemplateOp,
)


@pytest.fixture(scope="session")
def plant():
    return reference_plant()


@pytest.fixture
def config():
    return make_config({}, seed=11)


def tiny_plant(speeds=(1.0,), groups=None, templates=None, mix=None) -> PlantSpec:
    """One-group plant whose templates are given as lists of (group, mean)."""
    machines = tuple(Machine(f"M{i + 1}", v) for i, v in enumerate(speeds))
    groups = groups or (MachineGroup("G1", tuple(m.id for m in machines)),)
    templates = templates or [[("G1", 1.0)]]
    tpls = tuple(
        ProcessTemplate(f"F{k + 1}", tuple(TemplateOp(f"F{k + 1}-o{i + 1}", g, mu) for i, (g, mu) in enumerate(ops)))
        for k, ops in enumerate(templates)
    )
    mix = mix or tuple([1.0 / len(tpls)] * len(tpls))
    return PlantSpec(machines, groups, tpls, mix)


def tiny_config(plant: PlantSpec, horizon: float = 100.0, **target_kw) -> InputConfig:
    kw = dict(rho_global=0.5, c_a2=1.0, c_p2=0.5, tau=3.0)
    kw.update(target_kw)
    return InputConfig(plant, DistributionParams(), TargetMetrics(**kw), DynamicScenario(), horizon)
