import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hetinfer import metrics, planner, presets, scaling, simulator
from hetinfer.core import ConfigError, DeviceFleet, DeviceSpec, WorkloadSpec
from hetinfer.planner import PlanRequest
from hetinfer.safety import ThermalPolicy
from hetinfer.simulator import FaultEvent, FaultScript, ThermalModel

# Reference fleet plan that uses every device: cpu embed/head, nvidia, intel, npu.
SPREAD = [0] + [2] * 6 + [3] * 3 + [1] * 3 + [0]


def cpu_run(**kw):
    req = PlanRequest(presets.fleet("cpu"), presets.model("gpt2"), presets.workload("standard"))
    plan, _ = planner.greedy_plan(req)
    return simulator.simulate(plan, req, **kw), req


def spread(n_queries=20, **wkw):
    req = PlanRequest(presets.reference_fleet(), presets.model("gpt2"), WorkloadSpec(n_queries=n_queries, **wkw))
    return planner.plan_from_assignment(req, SPREAD), req


def test_step_temperature_examples():
    th = ThermalModel({"d": simulator.DeviceThermal(0.2, 30.0, 25.0)})
    assert simulator.step_temperature(th, "d", 25.0, 0.0, 5.0) == 25.0
    assert simulator.step_temperature(th, "d", 25.0, 100.0, 30.0) == pytest.approx(25 + 20 * (1 - math.exp(-1)), rel=1e-15)
    assert simulator.step_temperature(th, "d", 80.0, 100.0, math.inf) == 45.0
    with pytest.raises(ValueError):
        simulator.step_temperature(th, "d", 25.0, 1.0, 0.0)


@given(st.floats(0, 200), st.floats(0, 500), st.floats(1e-3, 100), st.floats(1e-3, 100))
def test_step_temperature_composes(t0, power, dt1, dt2):
    th = ThermalModel({"d": simulator.DeviceThermal(0.3, 20.0, 25.0)})
    two = simulator.step_temperature(th, "d", simulator.step_temperature(th, "d", t0, power, dt1), power, dt2)
    one = simulator.step_temperature(th, "d", t0, power, dt1 + dt2)
    assert two == pytest.approx(one, rel=1e-12, abs=1e-9)


def test_single_cpu_energy_reproduces_calibration():
    r, _ = cpu_run(governor=False)
    assert r.total_energy == pytest.approx(43_057.7, rel=5e-3)
    assert r.energy_per_token == pytest.approx(21.53, rel=5e-3)


def test_determinism_byte_identical():
    plan, req = spread(15)
    faults = FaultScript((FaultEvent(0.4, "npu", "recoverable"),), rng_seed=9)
    a = simulator.simulate(plan, req, faults=faults, seed=11).to_json()
    b = simulator.simulate(plan, req, faults=faults, seed=11).to_json()
    assert a == b


def test_seed_changes_outcomes():
    plan, req = spread(40)
    a = simulator.simulate(plan, req, seed=1).outcomes
    b = simulator.simulate(plan, req, seed=2).outcomes
    assert a != b


def test_empty_workload_is_all_zero():
    plan, req = spread(0)
    r = simulator.simulate(plan, req)
    assert (r.n_submitted, r.n_completed, r.n_lost) == (0, 0, 0)
    assert r.total_energy == 0.0 and r.wall_time == 0.0
    assert r.coverage is None and r.query_latencies == []


def test_accounting_invariants():
    plan, req = spread(25)
    r = simulator.simulate(plan, req, seed=3)
    e = r.energy
    assert e["prefill"] + e["decode"] + e["overhead"] == pytest.approx(e["total"], rel=1e-12)
    assert math.fsum(r.energy_increments) == pytest.approx(r.total_energy, rel=1e-9)
    assert r.n_completed + r.n_lost + r.n_rejected == r.n_submitted
    assert metrics.breakdown_check(r)
    w = req.workload
    per_query = r.total_energy / r.n_completed
    assert r.energy_per_token * w.n_samples * w.tokens_per_sample == pytest.approx(per_query, rel=1e-9)


def test_utilization_is_a_fraction():
    plan, req = spread(10)
    r = simulator.simulate(plan, req)
    assert all(0.0 <= u <= 1.0 for u in r.utilization.values())
    assert r.utilization["gpu_nvidia"] > 0


def test_traces_csv_columns():
    r, _ = cpu_run()
    lines = r.temperature_csv().splitlines()
    assert lines[0] == "time_s,device_id,value"
    assert len(lines) > 1 and lines[1].split(",")[1] == "cpu"
    assert r.utilization_csv().startswith("time_s,device_id,value\n")


def test_infeasible_plan_refused():
    tiny = DeviceSpec("t", "CPU", 1e3, 1e10, 1e9, 10.0)
    req = PlanRequest(DeviceFleet((tiny,)), presets.model("gpt2"), presets.workload("standard"))
    plan, _ = planner.greedy_plan(req)
    with pytest.raises(simulator.SimulationRefused) as exc:
        simulator.simulate(plan, req)
    assert exc.value.constraint_report


def test_fault_on_unknown_device_is_config_error():
    plan, req = spread(2)
    with pytest.raises(ConfigError, match="ghost"):
        simulator.simulate(plan, req, faults=FaultScript((FaultEvent(0.1, "ghost", "fail"),)))


def test_fault_script_rejects_decreasing_times():
    with pytest.raises(ConfigError):
        FaultScript((FaultEvent(2.0, "npu", "fail"), FaultEvent(1.0, "npu", "fail")))


@pytest.mark.parametrize("failed", [["npu"], ["gpu_intel"], ["gpu_intel", "gpu_nvidia"], ["npu", "gpu_intel"]])
def test_failures_lose_nothing_and_respect_bound(failed):
    plan, req = spread(30)
    faults = FaultScript(tuple(FaultEvent(0.5, d, "fail") for d in failed))
    r = simulator.simulate(plan, req, faults=faults)
    assert r.n_lost == 0 and r.n_completed == 30
    assert r.redistributions and all(x["within_budget"] for x in r.redistributions)
    assert all(x["delay_s"] <= 0.100 for x in r.redistributions)
    assert r.post_failure_checks and all(c["ok"] for c in r.post_failure_checks)


def test_recoverable_fault_recovers():
    plan, req = spread(30)
    r = simulator.simulate(plan, req, faults=FaultScript((FaultEvent(0.3, "npu", "recoverable"),), rng_seed=3))
    kinds = [e.kind for e in r.safety_events]
    assert "fail" in kinds and "recover" in kinds
    assert r.n_lost == 0


def sustained_gpu(r_th):
    fleet = presets.fleet("gpu")
    req = PlanRequest(fleet, presets.model("lfm2-2.6b"), presets.workload("sustained"))
    plan, _ = planner.greedy_plan(req)
    return plan, req, ThermalModel.for_fleet(fleet, {"gpu_nvidia": {"r_th": r_th}})


@settings(max_examples=8, deadline=None)
@given(st.floats(0.25, 0.6))
def test_governor_keeps_every_trace_below_limit(r_th):
    plan, req, th = sustained_gpu(r_th)
    r = simulator.simulate(plan, req, thermal=th, horizon=300.0, traces=True)
    limit = ThermalPolicy().theta_throttle * req.fleet.get("gpu_nvidia").t_max
    assert max(v for _, _, v in r.temperature_trace) <= limit
    assert sum(r.threshold_crossings.values()) == 0
    assert sum(r.hw_throttle_events.values()) == 0


def test_ungoverned_hot_run_crosses():
    plan, req, th = sustained_gpu(0.4)
    r = simulator.simulate(plan, req, thermal=th, governor=False, horizon=600.0)
    assert sum(r.threshold_crossings.values()) >= 1


def test_bernoulli_p_tenth_matches_binomial():
    out = simulator.bernoulli_outcomes(0.1, 10_000, 20, seed=7)
    want = 1 - 0.9**20
    sigma = math.sqrt(want * (1 - want) / 10_000)
    assert abs(metrics.any_success_rate(out.tolist(), 20) - want) <= 3 * sigma


def test_synthesized_outcomes_follow_coverage_law():
    """Any-success over S samples tracks 1 - exp(-a S^beta) at every S."""
    p = scaling.ScalingParams().replace(beta_s=0.68)
    rows = [simulator.query_outcomes(p, 125e6, 100, 20, 5, q) for q in range(8000)]
    for s in (1, 5, 10, 20):
        want = scaling.coverage(p, 125e6, s, 100)
        sigma = math.sqrt(want * (1 - want) / len(rows))
        got = float(np.mean([r[:s].any() for r in rows]))
        assert abs(got - want) <= 4 * sigma


def test_query_outcomes_prefix_stable():
    p = scaling.ScalingParams()
    a = simulator.query_outcomes(p, 125e6, 100, 5, 0, 3)
    b = simulator.query_outcomes(p, 125e6, 100, 20, 0, 3)
    assert list(a) == list(b[:5])


def test_record_pass_outcomes_checks_shape():
    r, _ = cpu_run(synthesize_outcomes=False)
    with pytest.raises(ValueError):
        simulator.record_pass_outcomes(r, [[True] * 20, [False] * 20])
    with pytest.raises(ValueError):
        simulator.record_pass_outcomes(r, [[True] * 19], n_samples=20)
    simulator.record_pass_outcomes(r, [[True] * 20], n_samples=20)
    assert r.coverage == 1.0
    assert metrics.pass_at_k_mean(r.outcomes, 7) == 1.0
    simulator.record_pass_outcomes(r, [[False] * 20])
    assert metrics.pass_at_k_mean(r.outcomes, 7) == 0.0
