"""Layer-to-device assignment: ranking, greedy placement, exhaustive oracle.

Both planners score assignments through ``CostModel.evaluate`` so that a
greedy plan and the oracle's optimum are compared with identical arithmetic.

Per-query cost of an assignment A (layers in dataflow order):

* compute energy: the energy law evaluated on the hosting device, times the
  layer's FLOP share;
* transfer: each boundary between different devices moves the hidden state
  for every prompt and generated token of every sample over the link; it
  costs link time, and link time times the mean busy power of both ends;
* coordination: a plan spanning more than one device pays the controller
  overhead time, drawn at the busy power of the device hosting the embedding.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from .core import (
    AllocationPlan,
    ConfigError,
    DeviceFleet,
    LayerSpec,
    ModelSpec,
    SafetyStatus,
    WorkloadSpec,
    layer_inventory,
    validate_fleet,
    validate_model,
    validate_workload,
)
from . import scaling
from .scaling import ScalingParams

THERMAL_LIMIT_FRACTION = 0.85
THROTTLE_RISK_FRACTION = 0.70
DEFAULT_MAX_STATES = int(2e7)
_CHUNK = 1 << 16


class SearchSpaceTooLarge(ValueError):
    """The exhaustive oracle refuses instances above its state budget."""

    def __init__(self, n_devices: int, n_layers: int, max_states: float):
        self.n_states = n_devices**n_layers
        self.max_states = max_states
        super().__init__(
            f"search space {n_devices}^{n_layers} = {self.n_states} states exceeds "
            f"max_states = {int(max_states)}"
        )


@dataclass(frozen=True)
class PlanRequest:
    fleet: DeviceFleet
    model: ModelSpec
    workload: WorkloadSpec
    params: ScalingParams = field(default_factory=ScalingParams)
    thermal_state: Optional[Mapping[str, float]] = None

    def problems(self) -> list[str]:
        out = validate_fleet(self.fleet) + validate_model(self.model) + validate_workload(self.workload)
        if self.thermal_state:
            unknown = set(self.thermal_state) - set(self.fleet.ids)
            if unknown:
                out.append(f"thermal_state names unknown devices {sorted(unknown)}")
        return out

    def check(self) -> None:
        problems = self.problems()
        if problems:
            raise ConfigError("; ".join(problems))

    def temperature(self, device_id: str) -> float:
        if self.thermal_state and device_id in self.thermal_state:
            return self.thermal_state[device_id]
        return self.fleet.get(device_id).t_ambient


@dataclass(frozen=True)
class ConstraintCheck:
    name: str
    satisfied: bool
    slack: float

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "satisfied": self.satisfied,
            "slack": self.slack if math.isfinite(self.slack) else None,
        }


@dataclass(frozen=True)
class PlanDiagnostics:
    device_ranking: list[tuple[str, float]]
    max_layers_per_device: dict[str, int]
    constraint_report: list[ConstraintCheck]
    excluded_devices: list[str] = field(default_factory=list)
    unplaced_layers: list[str] = field(default_factory=list)

    @property
    def violated(self) -> list[str]:
        return [c.name for c in self.constraint_report if not c.satisfied]

    def to_dict(self) -> dict:
        return {
            "device_ranking": [{"device": d, "score": s} for d, s in self.device_ranking],
            "max_layers_per_device": dict(self.max_layers_per_device),
            "constraint_report": [c.to_dict() for c in self.constraint_report],
            "excluded_devices": list(self.excluded_devices),
            "unplaced_layers": list(self.unplaced_layers),
            "violated": self.violated,
        }


def efficiency_score(dev) -> float:
    """FLOPs per joule, 2 f n_cores / P."""
    return 2.0 * dev.frequency * dev.n_cores / dev.power_peak


def rank_devices(fleet: DeviceFleet) -> list[tuple[str, float]]:
    """Devices by efficiency score, best first; ties by priority then id."""
    scored = [(d.id, efficiency_score(d), d.priority) for d in fleet]
    scored.sort(key=lambda x: (-x[1], x[2], x[0]))
    return [(i, s) for i, s, _ in scored]


def hidden_state_bytes(model: ModelSpec, workload: WorkloadSpec) -> float:
    """Bytes crossing one device boundary per query."""
    tokens = workload.n_samples * (workload.prompt_tokens + workload.tokens_per_sample)
    return tokens * model.hidden_size * model.bytes_per_param


class CostModel:
    """Dense per-(layer, device) cost tables for one request."""

    def __init__(self, req: PlanRequest):
        self.req = req
        p, m, w = req.params, req.model, req.workload
        self.layers: list[LayerSpec] = layer_inventory(m)
        self.devices = list(req.fleet.devices)
        self.ids = [d.id for d in self.devices]
        D = len(self.devices)
        total_flops = m.flops_per_token_total
        self.share = np.array([layer.flops_per_token / total_flops for layer in self.layers])
        self.footprint = np.array([layer.mem_footprint for layer in self.layers])
        self.mem_max = np.array([d.mem_max for d in self.devices])
        dev_energy = np.array(
            [
                scaling.energy(p, d, m.n_params, w.n_samples, w.tokens_per_sample, w.quantization)
                for d in self.devices
            ]
        )
        self.busy_power = np.array([d.power_peak * p.gamma_util for d in self.devices])
        self.layer_energy = self.share[:, None] * dev_energy[None, :]
        pre = np.array([scaling.prefill_time(p, d, m, w) for d in self.devices])
        dec = np.array([scaling.decode_time(p, d, m, w) for d in self.devices])
        self.layer_prefill = self.share[:, None] * pre[None, :]
        self.layer_decode = self.share[:, None] * dec[None, :]
        self.layer_time = self.layer_prefill + self.layer_decode
        nbytes = hidden_state_bytes(m, w)
        self.io_bytes = nbytes
        self.io_time = np.zeros((D, D))
        self.io_energy = np.zeros((D, D))
        for a in range(D):
            for b in range(D):
                if a != b:
                    t = nbytes / req.fleet.link_bw(self.ids[a], self.ids[b])
                    self.io_time[a, b] = t
                    self.io_energy[a, b] = t * 0.5 * (self.busy_power[a] + self.busy_power[b])
        self.overhead_time = scaling.overhead_time(p, w.n_samples)
        self.overhead_energy = self.overhead_time * self.busy_power
        self.thermal_ok = np.array(
            [req.temperature(d.id) <= THERMAL_LIMIT_FRACTION * d.t_max for d in self.devices]
        )
        self.coverage = scaling.coverage(p, m.n_params, w.n_samples, w.tokens_per_sample)

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    @property
    def n_devices(self) -> int:
        return len(self.devices)

    def evaluate(self, A: np.ndarray):
        """Energy, latency, memory and feasibility for assignment rows A[k, L].

        Accumulates layer by layer in dataflow order so any single
        assignment gets the same float result regardless of batch size.
        """
        A = np.atleast_2d(A)
        K, L = A.shape
        energy = np.zeros(K)
        lat = np.zeros(K)
        mem = np.zeros((K, self.n_devices))
        rows = np.arange(K)
        het = np.zeros(K, dtype=bool)
        for layer in range(L):
            a = A[:, layer]
            energy += self.layer_energy[layer, a]
            lat += self.layer_time[layer, a]
            mem[rows, a] += self.footprint[layer]
            if layer > 0:
                prev = A[:, layer - 1]
                energy += self.io_energy[prev, a]
                lat += self.io_time[prev, a]
                het |= prev != a
        energy += np.where(het, self.overhead_energy[A[:, 0]], 0.0)
        lat += np.where(het, self.overhead_time, 0.0)
        feasible = np.all(mem <= self.mem_max[None, :], axis=1)
        feasible &= np.all(self.thermal_ok[A], axis=1)
        feasible &= lat <= self.req.workload.latency_sla
        return energy, lat, mem, feasible


def _status(req: PlanRequest, cm: CostModel, used: Sequence[int], feasible: bool) -> SafetyStatus:
    if not feasible:
        return SafetyStatus.INFEASIBLE
    for i in used:
        d = cm.devices[i]
        if req.temperature(d.id) > THROTTLE_RISK_FRACTION * d.t_max:
            return SafetyStatus.THROTTLE_RISK
    return SafetyStatus.OK


def plan_from_assignment(req: PlanRequest, vector: Sequence[int], cm: Optional[CostModel] = None) -> AllocationPlan:
    """Build a plan from a full device-index vector (one entry per layer)."""
    cm = cm or CostModel(req)
    A = np.asarray(vector, dtype=np.int64)[None, :]
    energy, lat, mem, feasible = cm.evaluate(A)
    used = sorted(set(int(i) for i in vector))
    ok = bool(feasible[0]) and cm.coverage >= req.workload.coverage_min
    return AllocationPlan(
        assignment={layer.key: cm.ids[int(i)] for layer, i in zip(cm.layers, vector)},
        predicted_energy=float(energy[0]),
        predicted_latency=float(lat[0]),
        predicted_power=float(sum(cm.busy_power[i] for i in used)),
        per_device_mem={d: float(mem[0, i]) for i, d in enumerate(cm.ids)},
        safety_status=_status(req, cm, used, ok),
    )


def _partial_plan(req: PlanRequest, cm: CostModel, placed: dict[int, int]) -> AllocationPlan:
    mem = {d: 0.0 for d in cm.ids}
    for layer_idx, dev in placed.items():
        mem[cm.ids[dev]] += float(cm.footprint[layer_idx])
    return AllocationPlan(
        assignment={cm.layers[l].key: cm.ids[d] for l, d in sorted(placed.items())},
        predicted_energy=math.nan,
        predicted_latency=math.nan,
        predicted_power=float(sum(cm.busy_power[d] for d in set(placed.values()))),
        per_device_mem=mem,
        safety_status=SafetyStatus.INFEASIBLE,
    )


def max_layers_per_device(cm: CostModel) -> dict[str, int]:
    """How many layers each device could hold on its own, smallest first."""
    fp = np.sort(cm.footprint)
    cum = np.cumsum(fp)
    return {d.id: int(np.searchsorted(cum, d.mem_max, side="right")) for d in cm.devices}


def check_constraints(plan: AllocationPlan, req: PlanRequest) -> list[ConstraintCheck]:
    """One entry per constraint: memory and power per device, latency,
    coverage, and thermal headroom per device."""
    p, w, m = req.params, req.workload, req.model
    used = set(plan.assignment.values())
    report = []
    for d in req.fleet:
        slack = d.mem_max - plan.per_device_mem.get(d.id, 0.0)
        report.append(ConstraintCheck(f"memory:{d.id}", slack >= 0, slack))
    for d in req.fleet:
        draw = d.power_peak * p.gamma_util if d.id in used else 0.0
        slack = d.power_peak - draw
        report.append(ConstraintCheck(f"power:{d.id}", slack >= 0, slack))
    lat_slack = w.latency_sla - plan.predicted_latency
    report.append(ConstraintCheck("latency", bool(lat_slack >= 0), lat_slack))
    cov = scaling.coverage(p, m.n_params, w.n_samples, w.tokens_per_sample)
    report.append(ConstraintCheck("coverage", cov >= w.coverage_min, cov - w.coverage_min))
    for d in req.fleet:
        slack = THERMAL_LIMIT_FRACTION * d.t_max - req.temperature(d.id)
        report.append(ConstraintCheck(f"thermal:{d.id}", slack >= 0, slack))
    return report


def greedy_plan(
    req: PlanRequest, thermal_precheck: bool = True, anchor: str = "rank"
) -> tuple[AllocationPlan, PlanDiagnostics]:
    """Greedy energy-minimizing placement.

    Embedding and LM head go together to the best-ranked device that can
    hold both (or separately to the best-ranked device with room for each).
    Decoders follow in index order, each to the device with the smallest
    marginal energy: its compute share, the transfer from the previous
    layer, the transfer into the head for the last decoder, and the
    coordination cost if it is the first layer to split the plan. Ties go
    to the better-ranked device.

    ``anchor="energy"`` instead places embedding and head by lowest per-unit
    compute energy (P * lambda), falling back to rank order on ties. It is a
    comparison variant; the default follows the efficiency ranking.
    """
    if anchor not in ("rank", "energy"):
        raise ValueError(f"anchor must be 'rank' or 'energy', got {anchor!r}")
    req.check()
    cm = CostModel(req)
    ranking = rank_devices(req.fleet)
    index = {d: i for i, d in enumerate(cm.ids)}
    order = [index[d] for d, _ in ranking]
    excluded = []
    if thermal_precheck:
        excluded = [cm.ids[i] for i in order if not cm.thermal_ok[i]]
        order = [i for i in order if cm.thermal_ok[i]]
    free = cm.mem_max.copy()
    L = cm.n_layers
    emb, head = 0, L - 1
    placed: dict[int, int] = {}

    anchor_order = order
    if anchor == "energy":
        unit = [cm.devices[i].power_peak * cm.devices[i].lam for i in order]
        anchor_order = [i for _, _, i in sorted(zip(unit, range(len(order)), order))]

    def first_fit(need: float) -> Optional[int]:
        for i in anchor_order:
            if free[i] >= need:
                return i
        return None

    both = first_fit(cm.footprint[emb] + cm.footprint[head])
    if both is not None:
        placed[emb] = placed[head] = both
        free[both] -= cm.footprint[emb] + cm.footprint[head]
    else:
        for layer in (emb, head):
            i = first_fit(cm.footprint[layer])
            if i is not None:
                placed[layer] = i
                free[i] -= cm.footprint[layer]

    if emb in placed and head in placed:
        het = placed[emb] != placed[head]
        prev = placed[emb]
        for layer in range(1, L - 1):
            best, best_cost = None, math.inf
            for i in order:
                if free[i] < cm.footprint[layer]:
                    continue
                c = cm.layer_energy[layer, i] + cm.io_energy[prev, i]
                if layer == L - 2:
                    c += cm.io_energy[i, placed[head]]
                if not het and i != prev:
                    c += cm.overhead_energy[placed[emb]]
                if c < best_cost:
                    best, best_cost = i, c
            if best is None:
                break
            placed[layer] = best
            free[best] -= cm.footprint[layer]
            het |= best != prev
            prev = best

    if len(placed) == L:
        plan = plan_from_assignment(req, [placed[l] for l in range(L)], cm)
        unplaced = []
    else:
        plan = _partial_plan(req, cm, placed)
        unplaced = [cm.layers[l].key for l in range(L) if l not in placed]
    report = check_constraints(plan, req)
    if unplaced:
        report.append(ConstraintCheck("placement", False, -float(len(unplaced))))
    diag = PlanDiagnostics(
        device_ranking=ranking,
        max_layers_per_device=max_layers_per_device(cm),
        constraint_report=report,
        excluded_devices=excluded,
        unplaced_layers=unplaced,
    )
    return plan, diag


def homogeneous_plan(req: PlanRequest, device_id: str) -> AllocationPlan:
    """Every layer on ``device_id``; infeasible if it does not fit."""
    cm = CostModel(req)
    i = cm.ids.index(device_id)
    return plan_from_assignment(req, [i] * cm.n_layers, cm)


def brute_force_plan(req: PlanRequest, max_states: float = DEFAULT_MAX_STATES) -> AllocationPlan:
    """Exhaustive minimum-energy plan over all D^L assignments.

    Assignments are enumerated in lexicographic order of their device-index
    vectors (fleet order, first layer most significant), so the first
    minimum found is the lexicographically smallest among ties.
    """
    req.check()
    cm = CostModel(req)
    D, L = cm.n_devices, cm.n_layers
    if D**L > max_states:
        raise SearchSpaceTooLarge(D, L, max_states)
    weights = D ** np.arange(L - 1, -1, -1, dtype=np.int64)
    total = D**L
    best_k, best_e = -1, math.inf
    for start in range(0, total, _CHUNK):
        k = np.arange(start, min(total, start + _CHUNK), dtype=np.int64)
        A = (k[:, None] // weights[None, :]) % D
        energy, _, _, feasible = cm.evaluate(A)
        energy = np.where(feasible, energy, math.inf)
        j = int(np.argmin(energy))
        if energy[j] < best_e:
            best_e, best_k = float(energy[j]), int(k[j])
    if best_k < 0:
        return _partial_plan(req, cm, {})
    vector = [(best_k // int(w)) % D for w in weights]
    return plan_from_assignment(req, vector, cm)
