"""Safety governor: thermal throttling, device health, input/output guardrails.

Health state is mutable and owned by one coordinator (the simulator loop).
The module-level functions wrap its methods and return ``(state, event)``
pairs so callers can treat each step as a transition.
"""

from __future__ import annotations

import enum
import json
import math
from collections import Counter, deque
from dataclasses import dataclass, field
from typing import Deque, Iterable, Mapping, Optional, Sequence

from .core import ConfigError


@dataclass(frozen=True)
class ThermalPolicy:
    theta_throttle: float = 0.85
    monitor_period_normal: float = 1.0
    monitor_period_hot: float = 0.1
    hot_threshold: float = 0.70

    def __post_init__(self):
        if not 0 < self.theta_throttle < 1:
            raise ConfigError("theta_throttle must lie in (0, 1)")
        if not 0 < self.hot_threshold < self.theta_throttle:
            raise ConfigError("hot_threshold must lie in (0, theta_throttle)")
        if not (self.monitor_period_hot > 0 and self.monitor_period_normal > 0):
            raise ConfigError("monitor periods must be > 0")

    def limit(self, t_max: float) -> float:
        return self.theta_throttle * t_max

    def period(self, temp: float, t_max: float) -> float:
        if temp > self.hot_threshold * t_max:
            return self.monitor_period_hot
        return self.monitor_period_normal

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def throttle_multiplier(policy: ThermalPolicy, temp: float, t_max: float) -> float:
    """Dispatch-rate factor: 1 up to theta*t_max, linear to 0 at t_max."""
    knee = policy.theta_throttle * t_max
    if temp <= knee:
        return 1.0
    m = 1.0 - (temp - knee) / (t_max - knee)
    return min(1.0, max(0.0, m))


class Health(str, enum.Enum):
    HEALTHY = "Healthy"
    DEGRADED = "Degraded"
    FAILED = "Failed"


@dataclass(frozen=True)
class SafetyEvent:
    timestamp: float
    device: str
    kind: str
    payload: Mapping = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "timestamp": self.timestamp,
            "device": self.device,
            "kind": self.kind,
            "payload": dict(self.payload),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def events_to_jsonl(events: Iterable[SafetyEvent]) -> str:
    return "".join(e.to_json() + "\n" for e in events)


@dataclass(frozen=True)
class HealthConfig:
    window: int = 100
    error_rate: float = 0.01
    timeout_factor: float = 10.0
    heartbeat_interval: float = 1.0
    missed_beats: int = 3
    reintro_capacity: float = 0.5
    ramp_duration: float = 60.0

    def __post_init__(self):
        if self.window < 1 or self.missed_beats < 1:
            raise ConfigError("window and missed_beats must be >= 1")
        if not 0 < self.reintro_capacity <= 1:
            raise ConfigError("reintro_capacity must lie in (0, 1]")
        if self.ramp_duration < 0 or self.heartbeat_interval <= 0 or self.timeout_factor <= 1:
            raise ConfigError("invalid health timing parameters")


@dataclass(frozen=True)
class Outcome:
    """Result of one dispatched unit of work on a device."""

    kind: str  # "ok" | "error" | "timeout"
    observed: float = 0.0
    expected: float = 0.0

    @classmethod
    def ok(cls) -> "Outcome":
        return cls("ok")

    @classmethod
    def error(cls) -> "Outcome":
        return cls("error")

    @classmethod
    def timeout(cls, observed: float, expected: float) -> "Outcome":
        return cls("timeout", observed, expected)


@dataclass
class DeviceHealth:
    status: Health = Health.HEALTHY
    consecutive_errors: int = 0
    error_window: Deque[bool] = field(default_factory=deque)
    last_heartbeat: float = 0.0
    reintro_capacity: float = 1.0
    recovered_at: Optional[float] = None

    def to_dict(self) -> dict:
        return {
            "status": self.status.value,
            "consecutive_errors": self.consecutive_errors,
            "window_errors": sum(self.error_window),
            "window_size": len(self.error_window),
            "last_heartbeat": self.last_heartbeat,
            "reintro_capacity": self.reintro_capacity,
        }


class HealthState:
    """Per-device health with failure detection and a linear recovery ramp."""

    def __init__(self, device_ids: Sequence[str], config: Optional[HealthConfig] = None, now: float = 0.0):
        self.config = config or HealthConfig()
        self.devices = {
            d: DeviceHealth(error_window=deque(maxlen=self.config.window), last_heartbeat=now)
            for d in device_ids
        }

    def __getitem__(self, device_id: str) -> DeviceHealth:
        try:
            return self.devices[device_id]
        except KeyError:
            raise KeyError(f"unknown device {device_id!r}") from None

    def status(self, device_id: str) -> Health:
        return self[device_id].status

    def usable(self) -> list[str]:
        return [d for d, h in self.devices.items() if h.status is not Health.FAILED]

    def healthy_count(self) -> int:
        return sum(1 for h in self.devices.values() if h.status is Health.HEALTHY)

    def _fail(self, device_id: str, now: float, reason: str, **payload) -> SafetyEvent:
        h = self[device_id]
        prev = h.status
        h.status = Health.FAILED
        h.reintro_capacity = 0.0
        h.recovered_at = None
        return SafetyEvent(now, device_id, "fail", {"reason": reason, "from": prev.value, **payload})

    def heartbeat(self, device_id: str, now: float) -> None:
        h = self[device_id]
        if h.status is not Health.FAILED:
            h.last_heartbeat = max(h.last_heartbeat, now)

    def check_heartbeat(self, device_id: str, now: float) -> Optional[SafetyEvent]:
        h = self[device_id]
        if h.status is Health.FAILED:
            return None
        limit = self.config.heartbeat_interval * self.config.missed_beats
        silent = now - h.last_heartbeat
        if silent > limit:
            return self._fail(device_id, now, "Heartbeat", silent_s=silent)
        return None

    def observe(self, device_id: str, outcome: Outcome, now: float) -> Optional[SafetyEvent]:
        h = self[device_id]
        if h.status is Health.FAILED:
            return None
        event = self.check_heartbeat(device_id, now)
        if event:
            return event
        cfg = self.config
        if outcome.kind == "timeout" and outcome.observed > cfg.timeout_factor * outcome.expected:
            return self._fail(
                device_id, now, "Timeout", observed=outcome.observed, expected=outcome.expected
            )
        is_error = outcome.kind == "error"
        h.error_window.append(is_error)
        h.consecutive_errors = h.consecutive_errors + 1 if is_error else 0
        h.last_heartbeat = max(h.last_heartbeat, now)
        n = len(h.error_window)
        if n >= cfg.window:
            errors = sum(h.error_window)
            if errors / n > cfg.error_rate:
                return self._fail(device_id, now, "ErrorRate", errors=errors, window=n)
        return None

    def recover(self, device_id: str, now: float) -> Optional[SafetyEvent]:
        h = self[device_id]
        if h.status is not Health.FAILED:
            return None
        h.status = Health.DEGRADED
        h.reintro_capacity = self.config.reintro_capacity
        h.recovered_at = now
        h.error_window.clear()
        h.consecutive_errors = 0
        h.last_heartbeat = now
        return SafetyEvent(now, device_id, "recover", {"capacity": h.reintro_capacity})

    def advance(self, now: float) -> list[SafetyEvent]:
        """Move recovery ramps forward to ``now``; returns promotion events."""
        events = []
        cfg = self.config
        for d, h in self.devices.items():
            if h.status is not Health.DEGRADED or h.recovered_at is None:
                continue
            span = now - h.recovered_at
            if cfg.ramp_duration == 0 or span >= cfg.ramp_duration:
                h.status = Health.HEALTHY
                h.reintro_capacity = 1.0
                h.recovered_at = None
                events.append(SafetyEvent(now, d, "healthy", {"capacity": 1.0}))
            else:
                start = cfg.reintro_capacity
                h.reintro_capacity = start + (1.0 - start) * max(span, 0.0) / cfg.ramp_duration
        return events

    def snapshot(self) -> dict:
        return {d: h.to_dict() for d, h in sorted(self.devices.items())}


def observe_outcome(state: HealthState, device_id: str, outcome: Outcome, now: float):
    return state, state.observe(device_id, outcome, now)


def recover(state: HealthState, device_id: str, now: float) -> HealthState:
    state.recover(device_id, now)
    return state


def advance(state: HealthState, now: float):
    return state, state.advance(now)


class GuaranteeVoid(ValueError):
    """No healthy device remains, so the degraded-latency bound does not apply."""


def degraded_latency_bound(tau_optimal: float, d_total: int, d_healthy: int) -> float:
    if d_healthy == 0:
        raise GuaranteeVoid("no healthy device remains; latency bound is void")
    if not 1 <= d_healthy <= d_total:
        raise ValueError(f"need 1 <= d_healthy <= d_total, got {d_healthy}, {d_total}")
    return tau_optimal * d_total / d_healthy


class RejectReason(str, enum.Enum):
    OVERSIZE = "Oversize"
    ENCODING = "Encoding"
    RATE_LIMIT = "RateLimit"


class HaltReason(str, enum.Enum):
    LENGTH_CAP = "LengthCap"
    REPETITION = "Repetition"
    MEMORY_BUDGET = "MemoryBudget"
    TIME_BUDGET = "TimeBudget"


@dataclass(frozen=True)
class GuardrailPolicy:
    max_seq_len: int = 2048
    max_gen_factor: float = 2.0
    repetition_fraction: float = 0.90
    repetition_window: int = 100
    mem_budget_factor: float = 1.5
    time_budget_factor: float = 5.0
    token_rate_limit: float = 100_000.0
    rate_window: float = 1.0

    def __post_init__(self):
        problems = []
        for name in ("max_gen_factor", "mem_budget_factor", "time_budget_factor"):
            if not getattr(self, name) > 1:
                problems.append(f"{name} must be > 1")
        if not 0 < self.repetition_fraction < 1:
            problems.append("repetition_fraction must lie in (0, 1)")
        if self.max_seq_len < 1 or self.repetition_window < 1:
            problems.append("max_seq_len and repetition_window must be >= 1")
        if not (self.token_rate_limit > 0 and self.rate_window > 0):
            problems.append("token_rate_limit and rate_window must be > 0")
        if problems:
            raise ConfigError("guardrails: " + "; ".join(problems))

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass(frozen=True)
class InputRequest:
    """A request as seen by the input validator.

    ``arrivals`` are the timestamps of this client's requests, the last one
    being the current request. When ``declared_tokens`` is omitted it is
    estimated as one token per four bytes.
    """

    data: bytes
    declared_tokens: Optional[int] = None
    arrivals: Sequence[float] = ()

    @property
    def tokens(self) -> int:
        if self.declared_tokens is not None:
            return self.declared_tokens
        return math.ceil(len(self.data) / 4)


@dataclass(frozen=True)
class Verdict:
    accepted: bool
    reason: Optional[str] = None

    def __bool__(self) -> bool:
        return self.accepted


ACCEPT = Verdict(True)
CONTINUE = Verdict(True)


def validate_input(policy: GuardrailPolicy, request: InputRequest) -> Verdict:
    """Checks run in order: size, UTF-8 well-formedness, token rate."""
    if request.tokens > policy.max_seq_len:
        return Verdict(False, RejectReason.OVERSIZE.value)
    try:
        request.data.decode("utf-8", errors="strict")
    except UnicodeDecodeError:
        return Verdict(False, RejectReason.ENCODING.value)
    if request.arrivals:
        now = request.arrivals[-1]
        recent = sum(1 for t in request.arrivals if now - policy.rate_window < t <= now)
        rate = recent * request.tokens / policy.rate_window
        if rate > policy.token_rate_limit:
            return Verdict(False, RejectReason.RATE_LIMIT.value)
    return ACCEPT


def check_output(policy: GuardrailPolicy, tokens: Sequence, expected_len: float) -> Verdict:
    if len(tokens) >= policy.max_gen_factor * expected_len:
        return Verdict(False, HaltReason.LENGTH_CAP.value)
    w = policy.repetition_window
    if len(tokens) >= w:
        top = Counter(tokens[-w:]).most_common(1)[0][1]
        if top / w > policy.repetition_fraction:
            return Verdict(False, HaltReason.REPETITION.value)
    return CONTINUE


def check_resources(
    policy: GuardrailPolicy,
    mem_used: float,
    expected_mem: float,
    elapsed: float,
    expected_latency: float,
) -> Verdict:
    if mem_used > policy.mem_budget_factor * expected_mem:
        return Verdict(False, HaltReason.MEMORY_BUDGET.value)
    if elapsed > policy.time_budget_factor * expected_latency:
        return Verdict(False, HaltReason.TIME_BUDGET.value)
    return CONTINUE
