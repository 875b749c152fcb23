from __future__ import annotations

from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import tiny_config, tiny_plant
from shopstream.datasets import make_config
from shopstream.generator import generate_instance
from shopstream.metrics import merge_downtimes, observed_metrics, scv
from shopstream.model import (
    BottleneckSpec,
    DueDateChange,
    EventStream,
    JobArrival,
    JobSpec,
    MachineDown,
    MachineGroup,
)


def two_group_plant():
    return tiny_plant(
        speeds=(1.0, 1.0),
        groups=(MachineGroup("G1", ("M1",)), MachineGroup("G2", ("M2",))),
        templates=[[("G1", 1.0)], [("G2", 1.0)]],
    )


def test_merge_examples():
    assert merge_downtimes([(0, 5), (3, 8)]) == [(0, 8)]
    assert merge_downtimes([(0, 2), (5, 6)]) == [(0, 2), (5, 6)]
    assert merge_downtimes([]) == []


intervals = st.lists(
    st.tuples(st.floats(0, 100), st.floats(0, 20)).map(lambda t: (t[0], t[0] + t[1])),
    max_size=15,
)


@given(intervals)
def test_merge_idempotent_and_union_preserving(iv):
    merged = merge_downtimes(iv)
    assert merge_downtimes(merged) == merged
    for (s0, e0), (s1, e1) in zip(merged, merged[1:]):
        assert e0 < s1
    # Every input point is covered and every merged endpoint comes from the input.
    for s, e in iv:
        assert any(a <= s and e <= b for a, b in merged)
    ends = {x for pair in iv for x in pair}
    assert all(a in ends and b in ends for a, b in merged)


def test_load_cv_two_groups():
    plant = two_group_plant()
    cfg = tiny_config(plant, horizon=10.0)
    jobs = [JobSpec(0, 0.0, "F1", (8.0,), 10.0), JobSpec(1, 1.0, "F2", (4.0,), 10.0)]
    m = observed_metrics(EventStream.build([(j.arrival, JobArrival(j)) for j in jobs], 10.0, cfg))
    assert m.rho_groups == pytest.approx({"G1": 0.8, "G2": 0.4})
    assert m.rho_global == pytest.approx(0.6)
    assert m.chi_load == pytest.approx(1 / 3, rel=1e-12)


def test_single_job_tightness_and_flag():
    cfg = tiny_config(tiny_plant(), horizon=100.0)
    job = JobSpec(0, 0.0, "F1", (10.0,), 50.0)
    m = observed_metrics(EventStream.build([(0.0, JobArrival(job))], 100.0, cfg))
    assert m.tau == pytest.approx(5.0)
    assert m.c_a2 == 0.0
    assert any("fewer than two" in f for f in m.flags)


def test_equal_processing_times_zero_scv():
    cfg = tiny_config(tiny_plant(), horizon=100.0)
    jobs = [JobSpec(i, float(i), "F1", (3.0,), 50.0) for i in range(5)]
    m = observed_metrics(EventStream.build([(j.arrival, JobArrival(j)) for j in jobs], 100.0, cfg))
    assert m.c_p2 == 0.0
    assert scv([2.0, 2.0]) == 0.0


def test_tightness_uses_final_due_date():
    cfg = tiny_config(tiny_plant(), horizon=100.0)
    job = JobSpec(0, 0.0, "F1", (10.0,), 50.0)
    stream = EventStream.build([(0.0, JobArrival(job)), (5.0, DueDateChange(0, 30.0))], 100.0, cfg)
    assert observed_metrics(stream).tau == pytest.approx(3.0)


def test_empty_stream_rejected():
    cfg = tiny_config(tiny_plant(), horizon=100.0)
    with pytest.raises(ValueError):
        observed_metrics(EventStream.build([], 100.0, cfg))


def test_downtime_ratio_weighted_by_speed():
    plant = tiny_plant(speeds=(2.0, 1.0), groups=(MachineGroup("G1", ("M1", "M2")),))
    cfg = tiny_config(plant, horizon=100.0)
    job = JobSpec(0, 0.0, "F1", (1.0,), 50.0)
    # Overlapping outages on M1 merge to 15 time units.
    pairs = [(0.0, JobArrival(job)), (10.0, MachineDown("M1", 10.0)), (15.0, MachineDown("M1", 10.0))]
    stream = EventStream.build(pairs, 100.0, cfg)
    assert observed_metrics(stream).delta == pytest.approx(2.0 * 15.0 / 300.0)


def window_stream(down: float):
    plant = tiny_plant(speeds=(1.0,))
    cfg = tiny_config(plant, horizon=100.0, bottlenecks=(BottleneckSpec(0.0, 20.0, "G1", 0.5),))
    job = JobSpec(0, 5.0, "F1", (8.0,), 50.0)
    pairs = [(5.0, JobArrival(job))]
    if down > 0:
        pairs.append((10.0, MachineDown("M1", down)))
    return EventStream.build(pairs, 100.0, cfg)


def test_window_utilization_rises_with_downtime():
    values = [observed_metrics(window_stream(d)).rho_windows[0] for d in (0.0, 2.0, 4.0, 8.0)]
    assert values[0] == pytest.approx(8.0 / 20.0)
    assert values[-1] == pytest.approx(8.0 / 12.0)
    assert all(b > a for a, b in zip(values, values[1:]))
    m = observed_metrics(window_stream(0.0))
    assert m.eps_bn == pytest.approx(0.1)


def test_trajectory_attribution_matches_nominal_for_serial_plan():
    cfg = make_config({}, seed=3)
    stream = generate_instance(cfg)
    nominal = observed_metrics(stream)
    records = []
    for job in stream.jobs:
        tpl = cfg.plant.template_index[job.template]
        for op, p in zip(tpl.operations, job.processing):
            machine = cfg.plant.group_machines[op.group][0]
            records.append(SimpleNamespace(machine=machine, start=0.0, end=1.0, processing=p))
    traj = observed_metrics(stream, SimpleNamespace(records=records))
    assert traj.attribution == "trajectory"
    assert traj.rho_global == pytest.approx(nominal.rho_global, rel=1e-12)
    assert traj.rho_groups == pytest.approx(nominal.rho_groups, rel=1e-12)
    assert traj.c_p2 == pytest.approx(nominal.c_p2, rel=1e-12)


def test_trajectory_window_proration():
    stream = window_stream(0.0)
    # Half of the execution interval falls inside the [0, 20] window.
    rec = SimpleNamespace(machine="M1", start=15.0, end=25.0, processing=8.0)
    m = observed_metrics(stream, SimpleNamespace(records=[rec]))
    assert m.rho_windows[0] == pytest.approx(4.0 / 20.0)


@pytest.mark.parametrize("seed", range(3))
def test_invariants_on_generated_streams(seed):
    m = observed_metrics(generate_instance(make_config({"delta": 0.1}, seed=seed)))
    assert m.rho_global >= 0 and all(r >= 0 for r in m.rho_groups.values())
    assert m.c_a2 >= 0 and m.c_p2 >= 0 and m.eps_bn >= 0
    again = type(m).from_dict(m.as_dict())
    assert np.array_equal(again.vector(), m.vector())
