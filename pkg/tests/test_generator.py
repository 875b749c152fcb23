from __future__ import annotations

import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, stats

from shopstream.datasets import dynamic_config, make_config
from shopstream.generator import (
    SHAPE_CAP,
    arrival_gamma,
    assign_due_dates,
    compute_base_rate,
    generate_instance,
    generate_plan,
    plan_disturbances,
    sample_arrivals,
    sample_jobs,
    sample_processing,
    warp_times,
    window_budget,
)
from shopstream.metrics import observed_metrics
from shopstream.model import (
    SCENARIO_KINDS,
    BottleneckSpec,
    DistributionParams,
    DynamicScenario,
    EventKind,
    derive_stream,
)

from conftest import tiny_config, tiny_plant


def _g(t, profile, A, T, H):
    if profile == "periodic":
        return 1.0 + A * math.sin(2 * math.pi * t / T)
    return 1.0 - A + 2.0 * A * t / H


def _quad_lambda(t, profile, A, T, H):
    return integrate.quad(_g, 0.0, t, args=(profile, A, T, H), limit=200, epsabs=1e-12)[0]


def test_base_rate_from_utilization():
    plant = tiny_plant(speeds=(2.5, 2.5, 2.5, 2.5), templates=[[("G1", 40.0)]])
    assert compute_base_rate(tiny_config(plant, rho_global=0.8)) == pytest.approx(0.2)


def test_base_rate_fixed_count(config):
    cfg = replace(config, n_jobs_fixed=200, horizon=1107.5)
    assert compute_base_rate(cfg) == pytest.approx(200 / 1107.5)


def test_base_rate_vanishes_with_utilization():
    plant = tiny_plant(templates=[[("G1", 40.0)]])
    assert compute_base_rate(tiny_config(plant, rho_global=1e-9)) < 1e-9


def test_gamma_parameters():
    assert arrival_gamma(3.0, 1.0)[0] == 1.0
    k, theta = arrival_gamma(2.0, 0.25)
    assert (k, theta) == (4.0, 0.125)


def test_arrival_moments_monte_carlo():
    rng = derive_stream(3, "arrivals")
    lam, c2 = 0.5, 2.0
    t = sample_arrivals(lam, c2, 2.0e5 / lam, rng)
    gaps = np.diff(t)
    assert gaps.size > 90_000
    assert gaps.mean() == pytest.approx(1 / lam, rel=0.02)
    assert gaps.var() / gaps.mean() ** 2 == pytest.approx(c2, rel=0.05)


def test_fixed_count_arrivals():
    t = sample_arrivals(1.0, 1.0, 500.0, derive_stream(0, "arrivals"), n_fixed=37)
    assert t.size == 37
    assert t[-1] == pytest.approx(0.999 * 500.0)
    assert np.all(np.diff(t) >= 0)


def test_arrival_parameters_must_be_positive():
    with pytest.raises(ValueError):
        sample_arrivals(0.0, 1.0, 10.0, derive_stream(0, "arrivals"))


def test_warp_identity_cases():
    raw = np.sort(np.random.default_rng(0).uniform(0, 100, 50))
    assert np.array_equal(warp_times(raw, "constant", 0.7, 10.0, 100.0), raw)
    assert np.array_equal(warp_times(raw, "linear", 0.0, 10.0, 100.0), raw)


@pytest.mark.parametrize("profile,A", [("periodic", 0.5), ("linear", 0.3), ("linear", 1.0)])
def test_warp_inverts_quadrature(profile, A):
    H = 1000.0
    T = H / 3
    raw = np.linspace(0.0, 0.999 * H, 25)
    out = warp_times(raw, profile, A, T, H)
    for r, w in zip(raw, out):
        assert abs(_quad_lambda(w, profile, A, T, H) - r) <= 1e-6 * H


@settings(max_examples=60, deadline=None)
@given(
    st.lists(st.floats(0, 300, allow_nan=False), min_size=2, max_size=40),
    st.sampled_from(["periodic", "linear"]),
    st.floats(0, 1),
)
def test_warp_preserves_order(xs, profile, A):
    raw = np.sort(np.asarray(xs))
    out = warp_times(raw, profile, A, 100.0, 300.0)
    assert np.all(np.diff(out) >= 0)
    assert out.min() >= 0 and out.max() <= 300.0


def test_due_dates():
    assert assign_due_dates([10.0], [20.0], 5.0, 1000.0)[0] == 110.0
    assert assign_due_dates([10.0], [20.0], 5.0, 100.0)[0] == 100.0
    assert assign_due_dates([10.0], [20.0], 1e-12, 100.0)[0] == pytest.approx(10.0)


def test_window_budget_examples():
    assert window_budget(100.0, 60.0, 0.9)[0] == pytest.approx(100 - 60 / 0.9)
    assert window_budget(100.0, 60.0, 0.5) == (0.0, False)
    # Infeasible budgets are capped at 95% of window capacity.
    assert window_budget(100.0, 1.0, 0.99) == (95.0, True)


def test_global_budget_substitution():
    plant = tiny_plant(speeds=(1.0,) * 10)
    cfg = tiny_config(plant, horizon=100.0, delta=0.1)
    _, budget, _, _ = plan_disturbances(cfg, [], derive_stream(0, "disturbance"))
    assert budget == pytest.approx(100.0)


@pytest.mark.parametrize("seed", range(4))
def test_disturbance_ratio_realized(seed):
    cfg = make_config({"delta": 0.12}, seed=seed)
    m = observed_metrics(generate_instance(cfg))
    assert m.delta == pytest.approx(0.12, rel=0.01)


def test_bottleneck_window_receives_outages(config):
    H = config.horizon
    b = BottleneckSpec(0.2 * H, 0.5 * H, "G2", 0.95)
    cfg = replace(config.with_targets(delta=0.05, bottlenecks=(b,)), seed=3)
    stream, plan = generate_plan(cfg)
    inside = [o for o in stream.outages if o.machine in ("M4", "M5") and o.start >= b.start and o.end <= b.end]
    assert plan.windows and plan.windows[0].budget > 0
    assert inside


def test_degenerate_mixture(plant):
    cfg = replace(make_config({}), plant=replace(plant, job_mix=(1.0, 0.0, 0.0)))
    _, tpl, _, _ = sample_jobs(cfg, np.arange(50.0), derive_stream(0, "processing"))
    assert set(tpl.tolist()) == {0}


def test_near_zero_scv_clamped():
    means = np.full(2000, 7.0)
    x = sample_processing(means, SHAPE_CAP, derive_stream(0, "processing"))
    assert x.mean() == pytest.approx(7.0, rel=0.01)
    assert np.all(np.abs(x / 7.0 - 1) < 0.01)


def test_processing_moment_match():
    x = sample_processing(np.full(100_000, 5.0), 1 / 0.6, derive_stream(2, "processing"))
    assert x.var() / x.mean() ** 2 == pytest.approx(0.6, rel=0.05)


def test_deterministic_batches(config):
    cfg = replace(config, dyn=DynamicScenario(p_batch=1.0), distri=DistributionParams(batch_mean=3.0, batch_std=0.0))
    times, tpl, proc, batch = sample_jobs(cfg, np.array([1.0, 5.0]), derive_stream(0, "processing"))
    assert times.tolist() == [1.0] * 3 + [5.0] * 3
    assert len(set(tpl[:3].tolist())) == 1 and len(set(tpl[3:].tolist())) == 1
    assert batch.tolist() == [0, 0, 0, 1, 1, 1]


def test_static_config_has_only_arrivals(config):
    stream = generate_instance(replace(config, targets=replace(config.targets, delta=0.0)))
    assert {e.kind for e in stream.events} == {EventKind.JOB_ARRIVAL}


def test_generation_deterministic(config):
    assert generate_instance(config) == generate_instance(config)


def test_full_complexity_event_kinds():
    """Each kind is missing from an instance with probability (1 - p)^N.

    Misses over 100 seeds must stay within a binomial bound on that rate;
    frequent kinds (priority changes) must never be missing.
    """
    dyn_cfg = dynamic_config("full-complexity", 0)
    probs = {
        EventKind.CANCELLATION: dyn_cfg.dyn.p_cancel,
        EventKind.REWORK: dyn_cfg.dyn.p_rework,
        EventKind.PRIORITY_CHANGE: dyn_cfg.dyn.p_prio,
        EventKind.ROUTE_CHANGE: dyn_cfg.dyn.p_route,
        EventKind.DUE_DATE_CHANGE: dyn_cfg.dyn.p_dd_chg,
    }
    misses = {k: 0 for k in probs}
    sizes = []
    for seed in range(100):
        stream = generate_instance(dynamic_config("full-complexity", seed))
        kinds = {e.kind for e in stream.events}
        sizes.append(len(stream.jobs))
        assert {EventKind.JOB_ARRIVAL, EventKind.MACHINE_DOWN, EventKind.PREVENTIVE_MAINTENANCE} <= kinds
        for k in probs:
            misses[k] += k not in kinds
    n_jobs = min(sizes)
    for k, p in probs.items():
        q = (1 - p) ** n_jobs
        bound = stats.binom.ppf(0.999, 100, q)
        assert misses[k] <= bound, (k, misses[k], bound)
    assert misses[EventKind.PRIORITY_CHANGE] == 0


def test_workload_consistency_open_count():
    plant = tiny_plant(speeds=(1.0, 1.0), templates=[[("G1", 4.0), ("G1", 6.0)]])
    cfg = replace(tiny_config(plant, horizon=4000.0, rho_global=0.7), seed=5)
    stream = generate_instance(cfg)
    assert len(stream.jobs) >= 500
    work = sum(j.work for j in stream.jobs)
    assert work / (cfg.horizon * 2.0) == pytest.approx(0.7, rel=0.10)
