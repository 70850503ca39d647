import itertools
import json
import math
from pathlib import Path

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from _instances import random_request
from hetinfer import planner, presets, scaling
from hetinfer.core import GB, DeviceFleet, DeviceSpec, SafetyStatus, WorkloadSpec, build_model
from hetinfer.planner import PlanRequest, SearchSpaceTooLarge

GOLDEN = Path(__file__).parent / "golden" / "brute_force_seed42.json"


def reference_request(model="gpt2", workload=None, **kw):
    return PlanRequest(presets.reference_fleet(), presets.model(model), workload or presets.workload("standard"), **kw)


def test_efficiency_score_cpu():
    cpu = presets.reference_fleet().get("cpu")
    assert planner.efficiency_score(cpu) == pytest.approx(2 * 2.8e9 * 8 / 45, rel=1e-12)
    assert planner.efficiency_score(cpu) == pytest.approx(9.956e8, rel=1e-3)


def test_doubling_power_halves_score():
    cpu = presets.reference_fleet().get("cpu")
    hot = DeviceSpec(**{**cpu.to_dict(), "power_peak": 90.0})
    assert planner.efficiency_score(hot) == planner.efficiency_score(cpu) / 2


def test_rank_ties_break_on_priority_then_id():
    base = dict(kind="GPU", mem_max=1e9, bandwidth=1e11, frequency=1e9, power_peak=100.0, n_cores=10)
    fleet = DeviceFleet((DeviceSpec(id="b", priority=1, **base), DeviceSpec(id="a", priority=2, **base), DeviceSpec(id="c", priority=1, **base)))
    assert [d for d, _ in planner.rank_devices(fleet)] == ["b", "c", "a"]


def test_single_device_fleet_places_everything_there():
    req = PlanRequest(presets.fleet("cpu"), presets.model("gpt2"), presets.workload("standard"))
    plan, _ = planner.greedy_plan(req)
    assert plan.feasible
    assert set(plan.assignment.values()) == {"cpu"}
    assert len(plan.assignment) == 14


def test_model_too_large_is_infeasible():
    tiny = DeviceSpec("t", "CPU", 1e3, 1e10, 1e9, 10.0)
    req = PlanRequest(DeviceFleet((tiny,)), presets.model("gpt2"), presets.workload("standard"))
    plan, diag = planner.greedy_plan(req)
    assert plan.safety_status is SafetyStatus.INFEASIBLE
    assert diag.unplaced_layers


def test_reference_plan_is_feasible():
    plan, diag = planner.greedy_plan(reference_request())
    assert plan.feasible
    assert not diag.violated


def test_npu_memory_slack_example():
    """21 GB on a 20 GB NPU reports slack of -1 GB."""
    req = reference_request("lfm2-2.6b")
    cm = planner.CostModel(req)
    plan = planner.plan_from_assignment(req, [cm.ids.index("npu")] * cm.n_layers, cm)
    scale = 21 * GB / plan.per_device_mem["npu"]
    forced = planner.AllocationPlan(
        plan.assignment, plan.predicted_energy, plan.predicted_latency, plan.predicted_power,
        {**plan.per_device_mem, "npu": plan.per_device_mem["npu"] * scale},
    )
    mem = {c.name: c for c in planner.check_constraints(forced, req)}
    assert not mem["memory:npu"].satisfied
    assert mem["memory:npu"].slack == pytest.approx(-1 * GB, rel=1e-9)
    assert mem["memory:cpu"].slack == req.fleet.get("cpu").mem_max


def test_zero_coverage_floor_always_satisfied():
    plan, _ = planner.greedy_plan(reference_request())
    checks = {c.name: c for c in planner.check_constraints(plan, reference_request())}
    assert checks["coverage"].satisfied


def test_coverage_floor_above_model_is_infeasible():
    w = WorkloadSpec(coverage_min=0.99)
    plan, _ = planner.greedy_plan(reference_request(workload=w))
    assert not plan.feasible


def test_hot_device_is_excluded_and_precheck_is_pure_filter():
    hot = {"npu": 90.0}
    plan, diag = planner.greedy_plan(reference_request(thermal_state=hot))
    assert "npu" in diag.excluded_devices
    assert "npu" not in plan.assignment.values()
    cool = {d: 25.0 for d in presets.reference_fleet().ids}
    a, _ = planner.greedy_plan(reference_request(thermal_state=cool), thermal_precheck=True)
    b, _ = planner.greedy_plan(reference_request(thermal_state=cool), thermal_precheck=False)
    assert a == b


def test_warm_device_gives_throttle_risk():
    plan, _ = planner.greedy_plan(reference_request(thermal_state={"npu": 75.0}))
    assert plan.safety_status is SafetyStatus.THROTTLE_RISK


# -- exhaustive oracle -------------------------------------------------------

def independent_energy(req, vector):
    """Per-layer FLOP-share energy, boundary transfers and split overhead,
    written directly from the scaling functions."""
    m, w, p = req.model, req.workload, req.params
    devs = req.fleet.devices
    total = 0.0
    for layer, i in zip(m.layers, vector):
        e = scaling.energy(p, devs[i], m.n_params, w.n_samples, w.tokens_per_sample, w.quantization)
        total += e * layer.flops_per_token / m.flops_per_token_total
    nbytes = w.n_samples * (w.prompt_tokens + w.tokens_per_sample) * m.hidden_size * m.bytes_per_param
    split = False
    for a, b in zip(vector, vector[1:]):
        if a != b:
            split = True
            t = nbytes / req.fleet.link_bw(devs[a].id, devs[b].id)
            total += t * 0.5 * (devs[a].power_peak + devs[b].power_peak) * p.gamma_util
    if split:
        total += scaling.overhead_time(p, w.n_samples) * devs[vector[0]].power_peak * p.gamma_util
    return total


def fits(req, vector):
    used = {}
    for layer, i in zip(req.model.layers, vector):
        used[i] = used.get(i, 0.0) + layer.mem_footprint
    return all(used[i] <= req.fleet.devices[i].mem_max for i in used)


@pytest.mark.parametrize("seed", range(8))
def test_brute_force_matches_itertools_enumeration(seed):
    req = random_request(seed, n_layers=6, n_devices=3)
    D, L = len(req.fleet.devices), len(req.model.layers)
    best = min(
        (independent_energy(req, v), v) for v in itertools.product(range(D), repeat=L) if fits(req, v)
    )
    plan = planner.brute_force_plan(req)
    assert plan.predicted_energy == pytest.approx(best[0], rel=1e-12)


def test_brute_force_single_device_equals_greedy():
    req = PlanRequest(presets.fleet("npu"), presets.model("gpt2"), presets.workload("standard"))
    assert planner.brute_force_plan(req) == planner.greedy_plan(req)[0]


def test_two_identical_devices_zero_io():
    base = dict(kind="NPU", mem_max=1e12, bandwidth=1e11, frequency=1e9, power_peak=20.0, n_cores=100, interconnect_bw=math.inf)
    fleet = DeviceFleet((DeviceSpec(id="a", **base), DeviceSpec(id="b", **base)))
    model = build_model("m", 1e6, 0, hidden_size=16, vocab_size=100)
    params = scaling.ScalingParams(overhead_const=0.0, overhead_alpha=0.0)
    req = PlanRequest(fleet, model, WorkloadSpec(), params)
    best = planner.brute_force_plan(req)
    one = planner.homogeneous_plan(req, "a")
    assert best.predicted_energy == pytest.approx(one.predicted_energy, rel=1e-15)


def test_search_space_guard():
    req = random_request(0, n_layers=10, n_devices=3)
    with pytest.raises(SearchSpaceTooLarge):
        planner.brute_force_plan(req, max_states=3**10 - 1)


def test_golden_seed42():
    """Optimum for the seed-42 instance, recorded by the oracle on first run."""
    req = random_request(42, n_layers=10, n_devices=3)
    plan = planner.brute_force_plan(req)
    record = {"predicted_energy_j": plan.predicted_energy, "assignment": plan.to_dict()["assignment"]}
    if not GOLDEN.exists():
        GOLDEN.parent.mkdir(parents=True, exist_ok=True)
        GOLDEN.write_text(json.dumps(record, indent=1, sort_keys=True) + "\n")
    golden = json.loads(GOLDEN.read_text())
    assert plan.predicted_energy == pytest.approx(golden["predicted_energy_j"], rel=1e-12)
    assert record["assignment"] == golden["assignment"]


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10**6))
def test_oracle_dominates_greedy_and_greedy_respects_memory(seed):
    req = random_request(seed, n_layers=7, n_devices=3)
    greedy, _ = planner.greedy_plan(req)
    best = planner.brute_force_plan(req)
    if greedy.feasible:
        assert best.feasible
        assert best.predicted_energy <= greedy.predicted_energy * (1 + 1e-12)
        for d in req.fleet:
            assert greedy.per_device_mem[d.id] <= d.mem_max


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6))
def test_shrinking_fleet_never_lowers_optimum(seed):
    req = random_request(seed, n_layers=7, n_devices=3)
    full = planner.brute_force_plan(req)
    sub = PlanRequest(req.fleet.subset(req.fleet.ids[:2]), req.model, req.workload, req.params)
    part = planner.brute_force_plan(sub)
    if part.feasible:
        assert full.predicted_energy <= part.predicted_energy * (1 + 1e-12)


def test_plan_round_trip():
    plan, _ = planner.greedy_plan(reference_request())
    assert planner.AllocationPlan.from_dict(plan.to_dict()) == plan


def test_every_layer_assigned_once():
    plan, _ = planner.greedy_plan(reference_request("llama-3.2-1b"))
    keys = [l.key for l in presets.model("llama-3.2-1b").layers]
    assert list(plan.assignment) == keys
