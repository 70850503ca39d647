"""Deterministic discrete-event simulation of a plan executing a workload.

Queries run closed-loop, one at a time. Each query is a list of phases: an
optional coordination overhead, then prefill and decode for every sample.
A phase is a chain of work items: one compute item per run of consecutive
layers on the same device, and a transfer item at each device boundary.

Energy follows the plan's cost model exactly (so a fault-free run spends
n_queries times the plan's predicted energy). Heat follows device power:
busy devices draw P * gamma_util, idle ones ``idle_fraction * P``, dead ones
nothing, and each device's temperature obeys a first-order RC law that is
integrated exactly over piecewise-constant power.

With the governor on, every dispatch is checked against the temperature the
device would reach by the end of the item; if that passes the safe limit
theta * t_max, the item is held back (the throttle multiplier of the
predicted temperature sets a minimum hold, and an exact cooling time makes
the end temperature land under the limit). With the governor off, devices
that reach t_max throttle in hardware, running at half clock until they cool
``hw_release_margin`` degrees below t_max.
"""

from __future__ import annotations

import heapq
import io
import itertools
import json
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Mapping, Optional

import numpy as np

from .core import (
    AllocationPlan,
    ConfigError,
    DeviceFleet,
    DeviceKind,
)
from . import planner, scaling
from .planner import CostModel, PlanRequest
from .safety import (
    GuardrailPolicy,
    Health,
    HealthConfig,
    HealthState,
    InputRequest,
    Outcome,
    SafetyEvent,
    ThermalPolicy,
    check_resources,
    degraded_latency_bound,
    throttle_multiplier,
    validate_input,
)

SCHEMA_VERSION = "1"
# Query latency is split into completed work by kind, governor holds, and
# stall (hung items, aborted work, recovery pauses).
LATENCY_COMPONENTS = ("prefill", "decode", "io", "overhead", "hold", "stall")
GOVERNOR_MARGIN = 1e-6  # degrees kept below the limit by the cooling hold
REDISTRIBUTION_BASE = 0.010  # seconds of bookkeeping before layers move
REDISTRIBUTION_BUDGET = 0.100

# (r_th in C/W, tau_th in s) by device kind
KIND_THERMAL = {
    DeviceKind.CPU: (0.8, 30.0),
    DeviceKind.NPU: (1.0, 20.0),
    DeviceKind.GPU: (0.2, 60.0),
}


class SimulationRefused(ValueError):
    def __init__(self, message: str, constraint_report=None):
        super().__init__(message)
        self.constraint_report = constraint_report or []


@dataclass(frozen=True)
class DeviceThermal:
    r_th: float
    tau_th: float
    t_ambient: float

    def __post_init__(self):
        if not (self.r_th > 0 and self.tau_th > 0):
            raise ConfigError("r_th and tau_th must be > 0")

    def steady_state(self, power: float) -> float:
        return self.t_ambient + self.r_th * power

    def step(self, t_now: float, power: float, dt: float) -> float:
        t_ss = self.steady_state(power)
        return t_ss + (t_now - t_ss) * math.exp(-dt / self.tau_th)


@dataclass(frozen=True)
class ThermalModel:
    devices: Mapping[str, DeviceThermal]
    idle_fraction: float = 0.10
    hw_throttle_factor: float = 0.5
    hw_release_margin: float = 2.0

    def __post_init__(self):
        object.__setattr__(self, "devices", dict(self.devices))
        if not 0 <= self.idle_fraction < 1 or not 0 < self.hw_throttle_factor < 1:
            raise ConfigError("idle_fraction must lie in [0, 1), hw_throttle_factor in (0, 1)")

    @classmethod
    def for_fleet(cls, fleet: DeviceFleet, overrides: Optional[Mapping[str, Mapping]] = None, **kw) -> "ThermalModel":
        overrides = overrides or {}
        devs = {}
        for d in fleet:
            r, tau = KIND_THERMAL[d.kind]
            o = dict(overrides.get(d.id, {}))
            devs[d.id] = DeviceThermal(
                r_th=o.get("r_th", r), tau_th=o.get("tau_th", tau), t_ambient=o.get("t_ambient", d.t_ambient)
            )
        return cls(devs, **kw)

    def __getitem__(self, device_id: str) -> DeviceThermal:
        try:
            return self.devices[device_id]
        except KeyError:
            raise ConfigError(f"thermal model has no entry for device {device_id!r}") from None

    def to_dict(self) -> dict:
        return {
            "devices": {k: dict(v.__dict__) for k, v in sorted(self.devices.items())},
            "idle_fraction": self.idle_fraction,
            "hw_throttle_factor": self.hw_throttle_factor,
            "hw_release_margin": self.hw_release_margin,
        }


def step_temperature(model: ThermalModel, device_id: str, t_now: float, power: float, dt: float) -> float:
    """Exact first-order response over ``dt`` seconds at constant ``power``."""
    if not dt > 0:
        raise ValueError("dt must be > 0")
    return model[device_id].step(t_now, power, dt)


def cooling_time(th: DeviceThermal, t0: float, target: float, power: float) -> float:
    """Seconds at ``power`` to fall from t0 to target (0 if already there)."""
    if t0 <= target:
        return 0.0
    t_ss = th.steady_state(power)
    if target <= t_ss:
        return math.inf
    return th.tau_th * math.log((t0 - t_ss) / (target - t_ss))


@dataclass(frozen=True)
class FaultEvent:
    time: float
    device: str
    action: str  # "fail" (permanent) | "recoverable"

    def to_dict(self) -> dict:
        return {"time": self.time, "device": self.device, "action": self.action}


@dataclass(frozen=True)
class FaultScript:
    events: tuple[FaultEvent, ...] = ()
    rng_seed: int = 0
    recovery_delay: tuple[float, float] = (5.0, 15.0)

    def __post_init__(self):
        object.__setattr__(self, "events", tuple(self.events))
        times = [e.time for e in self.events]
        if any(b < a for a, b in zip(times, times[1:])):
            raise ConfigError("fault script times must be nondecreasing")
        for e in self.events:
            if e.action not in ("fail", "recoverable"):
                raise ConfigError(f"unknown fault action {e.action!r}")
            if e.time < 0:
                raise ConfigError("fault times must be >= 0")

    def to_dict(self) -> dict:
        return {
            "rng_seed": self.rng_seed,
            "recovery_delay": list(self.recovery_delay),
            "fault": [e.to_dict() for e in self.events],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "FaultScript":
        try:
            events = tuple(FaultEvent(**e) for e in d.get("fault", []))
            return cls(events, int(d.get("rng_seed", 0)), tuple(d.get("recovery_delay", (5.0, 15.0))))
        except TypeError as exc:
            raise ConfigError(f"fault script: {exc}") from exc


def _positive_stable(beta: float, rng: np.random.Generator) -> float:
    """One draw with Laplace transform exp(-s^beta) (Kanter's representation)."""
    u = rng.uniform(0.0, math.pi)
    w = rng.exponential()
    a = math.sin(beta * u) / math.sin(u) ** (1.0 / beta)
    b = (math.sin((1.0 - beta) * u) / w) ** ((1.0 - beta) / beta)
    return a * b


def query_outcomes(params: scaling.ScalingParams, n_params: float, tokens: int, n_samples: int, seed: int, query: int) -> np.ndarray:
    """Per-sample successes for one query.

    Each query draws a latent difficulty rate r = a^(1/beta_S) X with X
    positive-stable(beta_S) and a = alpha N^beta_N T^delta; its samples are
    then i.i.d. Bernoulli(1 - exp(-r)). The marginal per-sample success
    probability is coverage at S = 1, and the chance that any of S samples
    succeeds is exactly 1 - exp(-a S^beta_S). The stream depends only on
    (seed, query), so a prefix of samples is shared across sample budgets.
    """
    rng = np.random.default_rng([seed, query, 0x5A4D])
    a = params.alpha * n_params**params.beta_n * tokens**params.delta
    if a == 0:
        return np.zeros(n_samples, dtype=bool)
    r = a ** (1.0 / params.beta_s) * _positive_stable(params.beta_s, rng)
    p = -math.expm1(-r)
    return rng.random(n_samples) < p


def bernoulli_outcomes(p: float, n_queries: int, n_samples: int, seed: int) -> np.ndarray:
    """Plain i.i.d. Bernoulli(p) outcome matrix."""
    return np.random.default_rng(seed).random((n_queries, n_samples)) < p


@dataclass
class SimReport:
    n_submitted: int = 0
    n_completed: int = 0
    n_lost: int = 0
    n_rejected: int = 0
    energy: dict = field(default_factory=lambda: {"prefill": 0.0, "decode": 0.0, "overhead": 0.0, "total": 0.0})
    io_energy: float = 0.0
    per_device_energy: dict = field(default_factory=dict)
    draw_energy: dict = field(default_factory=dict)
    query_latencies: list = field(default_factory=list)
    latency_components: dict = field(default_factory=lambda: dict.fromkeys(LATENCY_COMPONENTS, 0.0))
    tau_optimal: float = 0.0
    wall_time: float = 0.0
    tokens_generated: int = 0
    utilization: dict = field(default_factory=dict)
    max_temperature: dict = field(default_factory=dict)
    threshold_crossings: dict = field(default_factory=dict)
    hw_throttle_events: dict = field(default_factory=dict)
    governor_holds: int = 0
    governor_hold_time: float = 0.0
    temperature_trace: list = field(default_factory=list)
    utilization_trace: list = field(default_factory=list)
    safety_events: list = field(default_factory=list)
    redistributions: list = field(default_factory=list)
    post_failure_checks: list = field(default_factory=list)
    outcomes: Optional[list] = None
    plan: dict = field(default_factory=dict)
    governor: bool = True
    seed: int = 0
    energy_increments: list = field(default_factory=list, repr=False)

    @property
    def total_energy(self) -> float:
        return self.energy["total"]

    @property
    def avg_power(self) -> float:
        """Mean electrical draw of the fleet from the device power-state model."""
        return math.fsum(self.draw_energy.values()) / self.wall_time if self.wall_time > 0 else 0.0

    @property
    def energy_rate(self) -> float:
        """Accounted energy per second of simulated time."""
        return self.total_energy / self.wall_time if self.wall_time > 0 else 0.0

    @property
    def energy_per_token(self) -> float:
        return self.total_energy / self.tokens_generated if self.tokens_generated else 0.0

    @property
    def throughput(self) -> float:
        return self.tokens_generated / self.wall_time if self.wall_time > 0 else 0.0

    @property
    def coverage(self) -> Optional[float]:
        if not self.outcomes:
            return None
        return sum(any(row) for row in self.outcomes) / len(self.outcomes)

    def latency_stats(self) -> dict:
        lat = self.query_latencies
        if not lat:
            return {"mean": 0.0, "std": 0.0, "p50": 0.0, "p99": 0.0, "max": 0.0}
        a = np.asarray(lat)
        return {
            "mean": float(a.mean()),
            "std": float(a.std()),
            "p50": float(np.percentile(a, 50)),
            "p99": float(np.percentile(a, 99)),
            "max": float(a.max()),
        }

    def to_dict(self, traces: bool = True) -> dict:
        d = {
            "schema_version": SCHEMA_VERSION,
            "seed": self.seed,
            "governor": self.governor,
            "queries": {
                "submitted": self.n_submitted,
                "completed": self.n_completed,
                "lost": self.n_lost,
                "rejected": self.n_rejected,
            },
            "energy_j": dict(self.energy),
            "io_energy_j": self.io_energy,
            "per_device_energy_j": dict(sorted(self.per_device_energy.items())),
            "avg_power_w": self.avg_power,
            "energy_rate_w": self.energy_rate,
            "draw_energy_j": dict(sorted(self.draw_energy.items())),
            "energy_per_token_j": self.energy_per_token,
            "tokens_generated": self.tokens_generated,
            "throughput_tok_s": self.throughput,
            "wall_time_s": self.wall_time,
            "tau_optimal_s": self.tau_optimal,
            "latency_s": self.latency_stats(),
            "query_latencies_s": list(self.query_latencies),
            "latency_components_s": dict(self.latency_components),
            "utilization": dict(sorted(self.utilization.items())),
            "max_temperature_c": dict(sorted(self.max_temperature.items())),
            "threshold_crossings": dict(sorted(self.threshold_crossings.items())),
            "hw_throttle_events": dict(sorted(self.hw_throttle_events.items())),
            "governor_holds": self.governor_holds,
            "governor_hold_time_s": self.governor_hold_time,
            "safety_events": [e.to_dict() for e in self.safety_events],
            "redistributions": self.redistributions,
            "post_failure_checks": self.post_failure_checks,
            "coverage": self.coverage,
            "outcomes": self.outcomes,
            "plan": self.plan,
        }
        if traces:
            d["temperature_trace"] = [list(r) for r in self.temperature_trace]
            d["utilization_trace"] = [list(r) for r in self.utilization_trace]
        return d

    def to_json(self, traces: bool = True) -> str:
        return json.dumps(_finite(self.to_dict(traces)), sort_keys=True, indent=1)

    def temperature_csv(self) -> str:
        return _trace_csv(self.temperature_trace)

    def utilization_csv(self) -> str:
        return _trace_csv(self.utilization_trace)

    def events_jsonl(self) -> str:
        return "".join(e.to_json() + "\n" for e in self.safety_events)


def _finite(obj):
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else None
    if isinstance(obj, dict):
        return {k: _finite(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_finite(v) for v in obj]
    return obj


def _trace_csv(rows) -> str:
    buf = io.StringIO()
    buf.write("time_s,device_id,value\n")
    for t, dev, v in rows:
        buf.write(f"{t!r},{dev},{v!r}\n")
    return buf.getvalue()


def record_pass_outcomes(report: SimReport, outcomes, n_samples: Optional[int] = None) -> SimReport:
    """Attach a queries x samples boolean matrix to ``report``."""
    rows = [[bool(x) for x in row] for row in outcomes]
    if len(rows) != report.n_completed:
        raise ValueError(f"outcome rows {len(rows)} != completed queries {report.n_completed}")
    widths = {len(r) for r in rows}
    if len(widths) > 1 or (n_samples is not None and rows and widths != {n_samples}):
        raise ValueError(f"outcome rows must all have {n_samples} columns, got widths {sorted(widths)}")
    report.outcomes = rows
    return report


@dataclass
class _Item:
    kind: str  # compute | io | overhead
    devices: tuple
    duration: float
    energy: float
    category: str  # prefill | decode | overhead
    io: bool = False


@dataclass
class _Running:
    item: _Item
    token: int
    start: float
    expected: float
    end: float = math.inf
    hung: bool = False
    power: dict = field(default_factory=dict)


@dataclass
class _Query:
    index: int
    start: float
    phases: list
    cursor: int = 0
    disturbed: bool = False
    healthy_at_start: int = 0
    time: dict = field(default_factory=lambda: dict.fromkeys(LATENCY_COMPONENTS, 0.0))


class _Sim:
    def __init__(self, plan, req, thermal, policy, guardrails, faults, seed, governor, horizon, health_config, synthesize, trace):
        self.req = req
        self.cm = CostModel(req)
        self.fleet = req.fleet
        self.ids = self.cm.ids
        self.index = {d: i for i, d in enumerate(self.ids)}
        self.thermal = thermal
        self.th = [thermal[d] for d in self.ids]
        self.policy = policy
        self.guard = guardrails
        self.faults = faults
        self.seed = seed
        self.governor = governor
        self.horizon = horizon
        self.synthesize = synthesize
        self.trace = trace
        self.health = HealthState(self.ids, health_config, now=0.0)
        self.rng_recover = np.random.default_rng([faults.rng_seed, seed, 0xFA17])
        keys = [layer.key for layer in self.cm.layers]
        self.vector = [self.index[plan.assignment[k]] for k in keys]
        self.original_vector = list(self.vector)
        self.tau_opt = self._plan_latency(self.vector)
        D = len(self.ids)
        t0 = [req.temperature(d) for d in self.ids]
        self.temp = list(t0)
        self.temp_time = [0.0] * D
        self.power = [self._idle_power(i) for i in range(D)]
        self.alive = [True] * D
        self.hw_throttled = [False] * D
        self.capacity = [1.0] * D
        self.busy_time = [0.0] * D
        self.busy_at_tick = [0.0] * D
        self.last_tick = 0.0
        self.limit = [policy.limit(self.fleet.get(d).t_max) for d in self.ids]
        self.t_max = [self.fleet.get(d).t_max for d in self.ids]
        self.events = []
        self.seq = itertools.count()
        self.now = 0.0
        self.token = 0
        self.running: Optional[_Running] = None
        self.waiting: Optional[int] = None  # token of a held dispatch
        self.query: Optional[_Query] = None
        self.items: deque = deque()
        self.next_query = 0
        self.finished = False
        self.paused = False
        self.pending_recoveries = 0
        self.replan_needed = False
        self.last_redistribution = None
        self.failure_seen = False
        self.recoverable = set()
        self.arrivals = deque()
        r = SimReport(seed=seed, governor=governor, plan=plan.to_dict())
        r.tau_optimal = self.tau_opt
        r.per_device_energy = {d: 0.0 for d in self.ids}
        r.draw_energy = {d: 0.0 for d in self.ids}
        r.max_temperature = {d: t0[i] for i, d in enumerate(self.ids)}
        r.threshold_crossings = {d: 0 for d in self.ids}
        r.hw_throttle_events = {d: 0 for d in self.ids}
        self.r = r
        self.outcome_rows = []

    # -- thermal -----------------------------------------------------------
    def _busy_power(self, i: int) -> float:
        p = float(self.cm.busy_power[i])
        return p * self.thermal.hw_throttle_factor if self.hw_throttled[i] else p

    def _idle_power(self, i: int) -> float:
        return float(self.cm.devices[i].power_peak) * self.thermal.idle_fraction

    def _advance_temp(self, i: int) -> float:
        dt = self.now - self.temp_time[i]
        if dt > 0:
            before = self.temp[i]
            after = self.th[i].step(before, self.power[i], dt)
            self.r.draw_energy[self.ids[i]] += self.power[i] * dt
            self.temp[i] = after
            self.temp_time[i] = self.now
            d = self.ids[i]
            if after > self.r.max_temperature[d]:
                self.r.max_temperature[d] = after
            if before <= self.limit[i] < after:
                self.r.threshold_crossings[d] += 1
        return self.temp[i]

    def _set_power(self, i: int, power: float) -> None:
        self._advance_temp(i)
        self.power[i] = power

    # -- event queue -------------------------------------------------------
    def _push(self, t: float, kind: str, payload=None) -> None:
        heapq.heappush(self.events, (t, next(self.seq), kind, payload))

    def _log(self, device: str, kind: str, **payload) -> None:
        self.r.safety_events.append(SafetyEvent(self.now, device, kind, payload))

    # -- plan helpers ------------------------------------------------------
    def _plan_latency(self, vector, caps=None) -> float:
        cm = self.cm
        caps = caps or [1.0] * len(self.ids)
        lat = 0.0
        het = False
        for l, i in enumerate(vector):
            lat += float(cm.layer_time[l, i]) / caps[i]
            if l > 0:
                lat += float(cm.io_time[vector[l - 1], i])
                het |= vector[l - 1] != i
        if het:
            lat += float(cm.overhead_time)
        return lat

    def _phases(self) -> list:
        phases = []
        if len(set(self.vector)) > 1:
            phases.append(("overhead", -1))
        for s in range(self.req.workload.n_samples):
            phases.append(("prefill", s))
            phases.append(("decode", s))
        return phases

    def _build_phase(self, phase: str) -> list[_Item]:
        cm, w, v = self.cm, self.req.workload, self.vector
        S = w.n_samples
        if phase == "overhead":
            c = v[0]
            return [_Item("overhead", (c,), float(cm.overhead_time), float(cm.overhead_energy[c]), "overhead")]
        table = cm.layer_prefill if phase == "prefill" else cm.layer_decode
        tokens = w.prompt_tokens if phase == "prefill" else w.tokens_per_sample
        step_bytes = tokens * self.req.model.hidden_size * self.req.model.bytes_per_param
        items: list[_Item] = []
        run_dev, run_dur, run_e = v[0], 0.0, 0.0
        for l, i in enumerate(v):
            if i != run_dev:
                items.append(_Item("compute", (run_dev,), run_dur, run_e, phase))
                t = step_bytes / self.fleet.link_bw(self.ids[run_dev], self.ids[i])
                e = t * 0.5 * float(cm.busy_power[run_dev] + cm.busy_power[i])
                items.append(_Item("io", (run_dev, i), t, e, phase, io=True))
                run_dev, run_dur, run_e = i, 0.0, 0.0
            pre, dec = float(cm.layer_prefill[l, i]), float(cm.layer_decode[l, i])
            e_layer = float(cm.layer_energy[l, i]) / S
            if pre + dec > 0:
                frac = (pre if phase == "prefill" else dec) / (pre + dec)
            else:
                frac = 1.0 if phase == "prefill" else 0.0
            run_dur += float(table[l, i]) / S
            run_e += e_layer * frac
        items.append(_Item("compute", (run_dev,), run_dur, run_e, phase))
        return items

    def _usable(self) -> list[int]:
        return [self.index[d] for d in self.health.usable()]

    def _select_plan(self) -> Optional[list]:
        usable = self._usable()
        if not usable:
            return None
        D = len(self.ids)
        d_healthy = self.health.healthy_count()
        bound = degraded_latency_bound(self.tau_opt, D, d_healthy) if d_healthy >= 1 else math.inf
        caps = list(self.capacity)
        candidates = []
        if all(i in usable for i in self.original_vector):
            candidates.append(list(self.original_vector))
        sub = self.fleet.subset([self.ids[i] for i in usable])
        temps = {self.ids[i]: self._advance_temp(i) for i in usable}
        sub_req = PlanRequest(sub, self.req.model, self.req.workload, self.req.params, temps)
        try:
            g, _ = planner.greedy_plan(sub_req)
            if g.feasible:
                keys = [layer.key for layer in self.cm.layers]
                candidates.append([self.index[g.assignment[k]] for k in keys])
        except ConfigError:
            pass
        for i in usable:
            candidates.append([i] * self.cm.n_layers)
        scored = []
        for vec in candidates:
            energy, _, mem, feasible = self.cm.evaluate(np.asarray(vec)[None, :])
            if not feasible[0]:
                continue
            scored.append((self._plan_latency(vec, caps), float(energy[0]), vec))
        if not scored:
            return None
        within = [s for s in scored if s[0] <= bound]
        if within:
            return min(within, key=lambda s: s[1])[2]
        return min(scored, key=lambda s: s[0])[2]

    # -- query flow --------------------------------------------------------
    def _start_query(self) -> None:
        w = self.req.workload
        if self.next_query >= w.n_queries or (self.horizon is not None and self.now >= self.horizon):
            self._finish()
            return
        q = self.next_query
        self.next_query += 1
        self.r.n_submitted += 1
        self.arrivals.append(self.now)
        while self.arrivals and self.arrivals[0] <= self.now - self.guard.rate_window:
            self.arrivals.popleft()
        verdict = validate_input(
            self.guard, InputRequest(b"", declared_tokens=w.prompt_tokens, arrivals=tuple(self.arrivals))
        )
        if not verdict:
            self.r.n_rejected += 1
            self._log("-", "reject", query=q, reason=verdict.reason)
            self._push(self.now, "query")
            return
        if self.replan_needed:
            self.replan_needed = False
            vec = self._select_plan()
            if vec is not None:
                self.vector = vec
        self.query = _Query(q, self.now, self._phases(), healthy_at_start=self.health.healthy_count())
        self._enter_phase()

    def _enter_phase(self) -> None:
        q = self.query
        if q.cursor >= len(q.phases):
            self._complete_query()
            return
        phase, _ = q.phases[q.cursor]
        self.items = deque(self._build_phase(phase))
        self._dispatch_next()

    def _dispatch_next(self) -> None:
        if not self.items:
            self.query.cursor += 1
            self._enter_phase()
            return
        item = self.items[0]
        usable = set(self._usable())
        if any(i not in usable for i in item.devices):
            # Remaining work references a device declared failed: restart the
            # phase under the current plan.
            phase, _ = self.query.phases[self.query.cursor]
            self.items = deque(self._build_phase(phase))
            item = self.items[0]
        hold = 0.0
        if item.kind != "io":
            i = item.devices[0]
            T = self._advance_temp(i)
            if self.hw_throttled[i] and T < self.t_max[i] - self.thermal.hw_release_margin:
                self.hw_throttled[i] = False
            if not self.governor and not self.hw_throttled[i] and T >= self.t_max[i]:
                self.hw_throttled[i] = True
                self.r.hw_throttle_events[self.ids[i]] += 1
                self._log(self.ids[i], "hw_throttle", temperature=T)
            if self.governor:
                hold = self._governor_hold(i, item)
        if hold > 0:
            self.r.governor_holds += 1
            self.r.governor_hold_time += hold
            self.query.time["hold"] += hold
            self.token += 1
            self.waiting = self.token
            self._push(self.now + hold, "start", self.token)
        else:
            self._start_item()

    def _on_start(self, token: int) -> None:
        if self.waiting != token:
            return
        self.waiting = None
        self._start_item()

    def _item_duration(self, item: _Item) -> float:
        if item.kind == "io":
            return item.duration
        i = item.devices[0]
        d = item.duration / self.capacity[i]
        if self.hw_throttled[i]:
            d /= self.thermal.hw_throttle_factor
        return d

    def _governor_hold(self, i: int, item: _Item) -> float:
        th = self.th[i]
        d = self._item_duration(item)
        if d <= 0:
            return 0.0
        p_busy, p_idle = self._busy_power(i), self._idle_power(i)
        T0 = self.temp[i]
        limit = self.limit[i] - GOVERNOR_MARGIN
        t_end = th.step(T0, p_busy, d)
        if t_end <= limit:
            return 0.0
        m = throttle_multiplier(self.policy, t_end, self.t_max[i])
        rate_hold = d * (1.0 / m - 1.0) if m > 0 else 0.0
        t_ss = th.steady_state(p_busy)
        # Start temperature from which d seconds of busy time end at the limit.
        t_req = t_ss + (limit - t_ss) * math.exp(d / th.tau_th)
        cool = cooling_time(th, T0, t_req, p_idle)
        if not math.isfinite(cool):
            raise SimulationRefused(
                f"{self.ids[i]}: a {d:.3g} s work item cannot run inside the thermal limit "
                f"even from idle; shorten items or lower r_th"
            )
        return max(rate_hold, cool)

    def _start_item(self) -> None:
        item = self.items[0]
        self.token += 1
        duration = self._item_duration(item)
        run = _Running(item, self.token, self.now, duration)
        self.running = run
        if any(not self.alive[i] for i in item.devices):
            run.hung = True
        else:
            run.end = self.now + duration
            if item.kind != "io":
                i = item.devices[0]
                self._set_power(i, self._busy_power(i))
            self._push(run.end, "end", run.token)
        slack = 1e-9 + 1e-9 * duration
        self._push(self.now + self.health.config.timeout_factor * duration + slack, "watchdog", run.token)

    def _on_end(self, token: int) -> None:
        run = self.running
        if run is None or run.token != token or run.hung:
            return
        item = run.item
        self.running = None
        if item.kind != "io":
            i = item.devices[0]
            self._set_power(i, self._idle_power(i))
            self.busy_time[i] += self.now - run.start
        key = "io" if item.kind == "io" else ("overhead" if item.kind == "overhead" else item.category)
        self.query.time[key] += self.now - run.start
        self._account(item)
        for i in item.devices:
            ev = self.health.observe(self.ids[i], Outcome.ok(), self.now)
            if ev:
                self._on_detect(self.index[ev.device], ev)
        self.items.popleft()
        self._dispatch_next()

    def _account(self, item: _Item) -> None:
        e = item.energy
        self.r.energy[item.category] += e
        self.r.energy_increments.append(e)
        if item.io:
            self.r.io_energy += e
            for i in item.devices:
                self.r.per_device_energy[self.ids[i]] += e / len(item.devices)
        else:
            self.r.per_device_energy[self.ids[item.devices[0]]] += e

    def _complete_query(self) -> None:
        q = self.query
        lat = self.now - q.start
        w = self.req.workload
        self.r.n_completed += 1
        self.r.query_latencies.append(lat)
        q.time["stall"] = lat - math.fsum(v for k, v in q.time.items() if k != "stall")
        for k, v in q.time.items():
            self.r.latency_components[k] += v
        self.r.tokens_generated += w.n_samples * w.tokens_per_sample
        budget = check_resources(self.guard, 0.0, 1.0, lat, self.tau_opt)
        if not budget:
            self._log("-", "budget", query=q.index, reason=budget.reason, latency=lat)
        if self.synthesize:
            row = query_outcomes(
                self.req.params, self.req.model.n_params, w.tokens_per_sample, w.n_samples, self.seed, q.index
            )
            self.outcome_rows.append(row.tolist())
        if self.failure_seen and not q.disturbed and self.last_redistribution is not None and q.start >= self.last_redistribution:
            if q.healthy_at_start >= 1:
                bound = degraded_latency_bound(self.tau_opt, len(self.ids), q.healthy_at_start)
                self.r.post_failure_checks.append(
                    {"query": q.index, "latency_s": lat, "bound_s": bound, "ok": lat <= bound}
                )
        self.query = None
        self._start_query()

    # -- faults ------------------------------------------------------------
    def _disturb(self) -> None:
        if self.query is not None:
            self.query.disturbed = True

    def _on_fault(self, k: int) -> None:
        ev = self.faults.events[k]
        i = self.index[ev.device]
        self._disturb()
        self._log(ev.device, "fault_injected", action=ev.action)
        if not self.alive[i]:
            return
        self._set_power(i, 0.0)
        self.alive[i] = False
        if ev.action == "recoverable":
            self.recoverable.add(i)
        run = self.running
        if run is not None and i in run.item.devices and not run.hung:
            run.hung = True
            if run.item.kind != "io":
                self.busy_time[i] += self.now - run.start

    def _on_watchdog(self, token: int) -> None:
        run = self.running
        if run is None or run.token != token or not run.hung:
            return
        observed = self.now - run.start
        for i in run.item.devices:
            if self.alive[i]:
                continue
            ev = self.health.observe(self.ids[i], Outcome.timeout(observed, run.expected), self.now)
            if ev:
                self._on_detect(i, ev)

    def _on_detect(self, i: int, ev: SafetyEvent) -> None:
        self.r.safety_events.append(ev)
        self.failure_seen = True
        self._disturb()
        keys_on = [l for l, dev in enumerate(self.vector) if dev == i]
        moved = float(sum(self.cm.footprint[l] for l in keys_on))
        bw = self.cm.devices[i].interconnect_bw
        delay = REDISTRIBUTION_BASE + moved / bw
        self._push(self.now + delay, "redistribute", {"device": i, "detected": self.now, "bytes": moved})
        if i in self.recoverable:
            lo, hi = self.faults.recovery_delay
            self.pending_recoveries += 1
            self._push(self.now + float(self.rng_recover.uniform(lo, hi)), "recover", i)

    def _on_redistribute(self, info: dict) -> None:
        self._disturb()
        if info["device"] not in self.vector:
            vec = list(self.vector)  # the active plan does not use it
        else:
            vec = self._select_plan()
        record = {
            "device": self.ids[info["device"]],
            "detected_at_s": info["detected"],
            "completed_at_s": self.now,
            "delay_s": self.now - info["detected"],
            "within_budget": self.now - info["detected"] <= REDISTRIBUTION_BUDGET + 1e-12,
            "bytes_moved": info["bytes"],
        }
        if vec is None:
            record["new_plan"] = None
            self.r.redistributions.append(record)
            self._log(self.ids[info["device"]], "redistribute", outcome="no_feasible_plan")
            if self.pending_recoveries > 0:
                self.paused = True
                self._abort_running()
            else:
                self._lose_remaining()
            return
        self.vector = vec
        self.last_redistribution = self.now
        record["new_plan"] = sorted({self.ids[i] for i in vec})
        self.r.redistributions.append(record)
        self._log(self.ids[info["device"]], "redistribute", devices=record["new_plan"], delay_s=record["delay_s"])
        self._resume_after_replan()

    def _abort_running(self) -> None:
        self.waiting = None
        run = self.running
        if run is not None:
            if not run.hung and run.item.kind != "io":
                i = run.item.devices[0]
                self._set_power(i, self._idle_power(i))
                self.busy_time[i] += self.now - run.start
            self.running = None
            self.token += 1

    def _resume_after_replan(self) -> None:
        self.paused = False
        if self.query is None:
            return
        run = self.running
        if self.waiting is not None:
            return  # the held item's device is checked again when it starts
        if run is None or run.hung:
            # Restart the interrupted phase under the new plan.
            self._abort_running()
            phase, _ = self.query.phases[self.query.cursor]
            if phase == "overhead" and len(set(self.vector)) == 1:
                self.query.cursor += 1
                self._enter_phase()
                return
            self.items = deque(self._build_phase(phase))
            self._dispatch_next()
        # A healthy item in flight finishes normally; the next dispatch
        # rebuilds the phase if it still touches a failed device.

    def _on_recover(self, i: int) -> None:
        self.pending_recoveries -= 1
        self.alive[i] = True
        self.recoverable.discard(i)
        self._set_power(i, self._idle_power(i))
        ev = self.health.recover(self.ids[i], self.now)
        if ev:
            self.r.safety_events.append(ev)
        self.capacity[i] = self.health[self.ids[i]].reintro_capacity
        self._disturb()
        self.replan_needed = True
        if self.paused:
            vec = self._select_plan()
            if vec is not None:
                self.vector = vec
                self.last_redistribution = self.now
                self.replan_needed = False
                self._resume_after_replan()

    def _lose_remaining(self) -> None:
        w = self.req.workload
        remaining = w.n_queries - self.next_query
        if self.horizon is not None:
            remaining = 0  # unstarted queries past a failure are never submitted
        lost = remaining + (1 if self.query is not None else 0)
        self.r.n_submitted += remaining
        self.r.n_lost += lost
        self._log("-", "queries_lost", count=lost)
        self._abort_running()
        self.query = None
        self.next_query = w.n_queries
        self._finish()

    # -- monitor -----------------------------------------------------------
    def _on_tick(self) -> None:
        if self.finished:
            return
        dt = self.now - self.last_tick
        run = self.running
        for i, d in enumerate(self.ids):
            T = self._advance_temp(i)
            busy = self.busy_time[i]
            if run is not None and not run.hung and run.item.kind != "io" and run.item.devices[0] == i:
                busy += self.now - run.start
            if self.trace:
                self.r.temperature_trace.append((self.now, d, T))
                if dt > 0:
                    self.r.utilization_trace.append((self.now, d, (busy - self.busy_at_tick[i]) / dt))
            self.busy_at_tick[i] = busy
            if self.alive[i]:
                self.health.heartbeat(d, self.now)
        self.last_tick = self.now
        for d in self.ids:
            ev = self.health.check_heartbeat(d, self.now)
            if ev:
                self._on_detect(self.index[d], ev)
        for ev in self.health.advance(self.now):
            self.r.safety_events.append(ev)
            self.replan_needed = True
        for i, d in enumerate(self.ids):
            if self.health.status(d) is not Health.FAILED:
                self.capacity[i] = self.health[d].reintro_capacity
        hot = any(
            self.temp[i] > self.policy.hot_threshold * self.t_max[i] for i in range(len(self.ids))
        )
        period = self.policy.monitor_period_hot if hot else self.policy.monitor_period_normal
        self._push(self.now + period, "tick")

    def _finish(self) -> None:
        self.finished = True

    # -- main loop ---------------------------------------------------------
    def run(self) -> SimReport:
        for k, ev in enumerate(self.faults.events):
            self._push(ev.time, "fault", k)
        self._push(0.0, "tick")
        self._push(0.0, "query")
        handlers = {
            "tick": lambda p: self._on_tick(),
            "query": lambda p: self._start_query(),
            "start": self._on_start,
            "end": self._on_end,
            "watchdog": self._on_watchdog,
            "fault": self._on_fault,
            "redistribute": self._on_redistribute,
            "recover": self._on_recover,
        }
        while self.events and not self.finished:
            t, _, kind, payload = heapq.heappop(self.events)
            self.now = t
            handlers[kind](payload)
        end = self.now
        for i in range(len(self.ids)):
            self._advance_temp(i)
        r = self.r
        r.wall_time = end
        r.energy["total"] = r.energy["prefill"] + r.energy["decode"] + r.energy["overhead"]
        r.utilization = {d: (self.busy_time[i] / end if end > 0 else 0.0) for i, d in enumerate(self.ids)}
        if self.synthesize:
            r.outcomes = self.outcome_rows
        return r


def simulate(
    plan: AllocationPlan,
    req: PlanRequest,
    thermal: Optional[ThermalModel] = None,
    policy: Optional[ThermalPolicy] = None,
    guardrails: Optional[GuardrailPolicy] = None,
    faults: Optional[FaultScript] = None,
    seed: int = 0,
    governor: bool = True,
    horizon: Optional[float] = None,
    health: Optional[HealthConfig] = None,
    synthesize_outcomes: bool = True,
    traces: bool = True,
) -> SimReport:
    """Run ``req.workload`` under ``plan`` and return the report.

    ``horizon`` stops admitting new queries after that many simulated
    seconds; the query in flight still completes.
    """
    req.check()
    thermal = thermal or ThermalModel.for_fleet(req.fleet)
    policy = policy or ThermalPolicy()
    guardrails = guardrails or GuardrailPolicy()
    faults = faults or FaultScript()
    for ev in faults.events:
        if ev.device not in req.fleet.ids:
            raise ConfigError(f"fault script references unknown device {ev.device!r}")
    for d in req.fleet.ids:
        thermal[d]
    keys = [layer.key for layer in CostModel(req).layers]
    if not plan.feasible or set(plan.assignment) != set(keys):
        missing = len(set(keys) - set(plan.assignment))
        report = [planner.ConstraintCheck("placement", missing == 0, -float(missing))]
        report += planner.check_constraints(plan, req)
        raise SimulationRefused("plan is infeasible or incomplete; refusing to simulate", report)
    return _Sim(plan, req, thermal, policy, guardrails, faults, seed, governor, horizon, health, synthesize_outcomes, traces).run()
