"""Domain types shared by the planner, the scaling evaluators and the simulator.

All types are frozen value objects. Validation that must report several
problems at once (fleets, models) returns a list of human readable violations
instead of raising, so config loaders can surface everything in one pass.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Iterator, Mapping, Optional, Sequence

GB = 1e9
DEFAULT_INTERCONNECT_BW = 32e9  # PCIe 4.0 class link, bytes/s
DEFAULT_ACTIVATION_OVERHEAD = 0.10


class ConfigError(ValueError):
    """Raised for invalid or inconsistent configuration input."""


class ModelStructureError(ValueError):
    """Raised when a model lacks its embedding or LM head, or has gaps."""


class DeviceKind(str, enum.Enum):
    CPU = "CPU"
    GPU = "GPU"
    NPU = "NPU"


class Quantization(str, enum.Enum):
    FP16 = "FP16"
    FP8 = "FP8"


BYTES_PER_PARAM = {Quantization.FP16: 2, Quantization.FP8: 1}

# Midpoints of the per-class efficiency ranges; CPU is the 1.0 baseline.
DEFAULT_LAMBDA = {DeviceKind.CPU: 1.0, DeviceKind.GPU: 0.4, DeviceKind.NPU: 0.15}


class LayerRole(str, enum.Enum):
    EMBEDDING = "Embedding"
    DECODER = "Decoder"
    LM_HEAD = "LMHead"


class SafetyStatus(str, enum.Enum):
    OK = "OK"
    THROTTLE_RISK = "ThrottleRisk"
    INFEASIBLE = "Infeasible"


@dataclass(frozen=True)
class DeviceSpec:
    """Capability vector of one accelerator.

    Units are SI throughout: bytes, bytes/second, Hz, watts, degrees Celsius.
    ``lam`` is the dimensionless energy multiplier (CPU = 1.0); when omitted it
    defaults from ``kind``. ``priority`` ranks devices for tie-breaking, lower
    value first.
    """

    id: str
    kind: DeviceKind
    mem_max: float
    bandwidth: float
    frequency: float
    power_peak: float
    n_cores: int = 1
    lam: Optional[float] = None
    vendor: str = ""
    t_max: float = 100.0
    t_ambient: float = 25.0
    priority: int = 0
    interconnect_bw: float = DEFAULT_INTERCONNECT_BW
    peer_bw: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "kind", DeviceKind(self.kind))
        if self.lam is None:
            object.__setattr__(self, "lam", DEFAULT_LAMBDA[self.kind])
        object.__setattr__(self, "peer_bw", dict(self.peer_bw))

    @property
    def compute(self) -> float:
        """Peak throughput in FLOP/s, 2 * f * n_cores."""
        return 2.0 * self.frequency * self.n_cores

    def link_bw(self, other: str) -> float:
        if other == self.id:
            return math.inf
        return self.peer_bw.get(other, self.interconnect_bw)

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "kind": self.kind.value,
            "vendor": self.vendor,
            "mem_max": self.mem_max,
            "bandwidth": self.bandwidth,
            "frequency": self.frequency,
            "power_peak": self.power_peak,
            "n_cores": self.n_cores,
            "lam": self.lam,
            "t_max": self.t_max,
            "t_ambient": self.t_ambient,
            "priority": self.priority,
            "interconnect_bw": self.interconnect_bw,
            "peer_bw": dict(sorted(self.peer_bw.items())),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "DeviceSpec":
        known = {f for f in cls.__dataclass_fields__}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"device {d.get('id', '?')!r}: unknown keys {sorted(extra)}")
        try:
            return cls(**d)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"device {d.get('id', '?')!r}: {exc}") from exc


def validate_device(dev: DeviceSpec) -> list[str]:
    problems = []
    for name in ("mem_max", "bandwidth", "frequency", "power_peak"):
        if not getattr(dev, name) > 0:
            problems.append(f"{dev.id}: {name} must be > 0 (got {getattr(dev, name)})")
    if dev.n_cores < 1:
        problems.append(f"{dev.id}: n_cores must be >= 1 (got {dev.n_cores})")
    if not 0 < dev.lam <= 1.0:
        problems.append(f"{dev.id}: lambda must lie in (0, 1] (got {dev.lam})")
    if not dev.interconnect_bw > 0 or any(not v > 0 for v in dev.peer_bw.values()):
        problems.append(f"{dev.id}: interconnect bandwidth must be > 0")
    if dev.t_ambient >= dev.t_max:
        problems.append(f"{dev.id}: ambient >= throttle threshold ({dev.t_ambient} >= {dev.t_max})")
    elif dev.t_ambient >= 0.85 * dev.t_max:
        problems.append(
            f"{dev.id}: ambient >= throttle threshold ({dev.t_ambient} >= 0.85 * {dev.t_max})"
        )
    return problems


@dataclass(frozen=True)
class DeviceFleet:
    devices: tuple[DeviceSpec, ...]
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "devices", tuple(self.devices))

    def __iter__(self) -> Iterator[DeviceSpec]:
        return iter(self.devices)

    def __len__(self) -> int:
        return len(self.devices)

    @property
    def ids(self) -> list[str]:
        return [d.id for d in self.devices]

    def get(self, device_id: str) -> DeviceSpec:
        for d in self.devices:
            if d.id == device_id:
                return d
        raise KeyError(device_id)

    def subset(self, ids: Sequence[str]) -> "DeviceFleet":
        keep = set(ids)
        return DeviceFleet(tuple(d for d in self.devices if d.id in keep), name=self.name)

    def link_bw(self, a: str, b: str) -> float:
        return self.get(a).link_bw(b)

    def to_dict(self) -> dict:
        return {"name": self.name, "device": [d.to_dict() for d in self.devices]}

    @classmethod
    def from_dict(cls, d: Mapping) -> "DeviceFleet":
        devs = d.get("device")
        if not isinstance(devs, list):
            raise ConfigError("fleet: expected a [[device]] array")
        return cls(tuple(DeviceSpec.from_dict(x) for x in devs), name=d.get("name", ""))


def validate_fleet(fleet: DeviceFleet) -> list[str]:
    """Return every invariant violation in ``fleet``; empty means valid."""
    problems = []
    if len(fleet) == 0:
        problems.append("fleet is empty")
    seen = set()
    for dev in fleet:
        if dev.id in seen:
            problems.append(f"duplicate device id {dev.id!r}")
        seen.add(dev.id)
        problems.extend(validate_device(dev))
    return problems


@dataclass(frozen=True)
class LayerSpec:
    role: LayerRole
    index: int
    mem_footprint: float
    flops_per_token: float
    n_params: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "role", LayerRole(self.role))

    @property
    def key(self) -> str:
        if self.role is LayerRole.DECODER:
            return f"decoder.{self.index}"
        return self.role.value.lower()

    def to_dict(self) -> dict:
        return {
            "role": self.role.value,
            "index": self.index,
            "mem_footprint": self.mem_footprint,
            "flops_per_token": self.flops_per_token,
            "n_params": self.n_params,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "LayerSpec":
        try:
            return cls(**d)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"layer {dict(d)!r}: {exc}") from exc


@dataclass(frozen=True)
class ModelSpec:
    """Transformer layer inventory plus the totals the scaling laws need."""

    name: str
    n_params: float
    layers: tuple[LayerSpec, ...]
    hidden_size: int = 768
    precision: Quantization = Quantization.FP16
    activation_overhead: float = DEFAULT_ACTIVATION_OVERHEAD
    flops_per_token_total: Optional[float] = None

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "precision", Quantization(self.precision))
        if self.flops_per_token_total is None:
            object.__setattr__(self, "flops_per_token_total", 2.0 * self.n_params)

    @property
    def bytes_per_param(self) -> int:
        return BYTES_PER_PARAM[self.precision]

    @property
    def n_decoders(self) -> int:
        return sum(1 for layer in self.layers if layer.role is LayerRole.DECODER)

    @property
    def total_footprint(self) -> float:
        return sum(layer.mem_footprint for layer in self.layers)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "n_params": self.n_params,
            "hidden_size": self.hidden_size,
            "precision": self.precision.value,
            "activation_overhead": self.activation_overhead,
            "flops_per_token_total": self.flops_per_token_total,
            "layer": [layer.to_dict() for layer in self.layers],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelSpec":
        d = dict(d)
        if "build" in d:
            b = dict(d.pop("build"))
            try:
                return build_model(name=d.get("name", b.pop("name", "model")), **b)
            except TypeError as exc:
                raise ConfigError(f"model build section: {exc}") from exc
        layers = d.pop("layer", None)
        if not isinstance(layers, list):
            raise ConfigError("model: expected a [[layer]] array or a [build] section")
        try:
            return cls(layers=tuple(LayerSpec.from_dict(x) for x in layers), **d)
        except TypeError as exc:
            raise ConfigError(f"model: {exc}") from exc


def layer_footprint(n_params: float, precision: Quantization, overhead: float) -> float:
    return n_params * BYTES_PER_PARAM[Quantization(precision)] * (1.0 + overhead)


def build_model(
    name: str,
    n_params: float,
    n_decoders: int,
    hidden_size: int,
    vocab_size: int,
    precision: Quantization | str = Quantization.FP16,
    activation_overhead: float = DEFAULT_ACTIVATION_OVERHEAD,
) -> ModelSpec:
    """Build a layer inventory from headline architecture numbers.

    Embedding and LM head each hold ``vocab_size * hidden_size`` parameters;
    the remainder is split evenly across decoders. Each layer's FLOPs per token
    is twice its parameter count, so the total is 2N.
    """
    precision = Quantization(precision)
    table = vocab_size * hidden_size
    if n_decoders > 0:
        per_decoder = (n_params - 2 * table) / n_decoders
        if per_decoder <= 0:
            raise ConfigError(
                f"{name}: embedding + head ({2 * table:.3g}) exceed n_params ({n_params:.3g})"
            )
        emb = head = float(table)
    else:
        per_decoder = 0.0
        emb = head = n_params / 2.0

    def mk(role, idx, p):
        return LayerSpec(role, idx, layer_footprint(p, precision, activation_overhead), 2.0 * p, p)

    layers = [mk(LayerRole.EMBEDDING, 0, emb)]
    layers += [mk(LayerRole.DECODER, i, per_decoder) for i in range(n_decoders)]
    layers.append(mk(LayerRole.LM_HEAD, 0, head))
    return ModelSpec(
        name=name,
        n_params=float(n_params),
        layers=tuple(layers),
        hidden_size=hidden_size,
        precision=precision,
        activation_overhead=activation_overhead,
    )


def validate_model(model: ModelSpec) -> list[str]:
    problems = []
    roles = [layer.role for layer in model.layers]
    if roles.count(LayerRole.EMBEDDING) != 1:
        problems.append(f"{model.name}: expected exactly one Embedding layer")
    if roles.count(LayerRole.LM_HEAD) != 1:
        problems.append(f"{model.name}: expected exactly one LMHead layer")
    idx = sorted(layer.index for layer in model.layers if layer.role is LayerRole.DECODER)
    if idx != list(range(len(idx))):
        problems.append(f"{model.name}: decoder indices not contiguous from 0: {idx}")
    for layer in model.layers:
        if not layer.mem_footprint > 0:
            problems.append(f"{model.name}: {layer.key} has non-positive footprint")
    if model.n_params <= 0:
        problems.append(f"{model.name}: n_params must be > 0")
    else:
        expected = model.n_params * model.bytes_per_param * (1.0 + model.activation_overhead)
        if abs(model.total_footprint - expected) > 0.10 * expected:
            problems.append(
                f"{model.name}: layer footprints sum to {model.total_footprint:.4g} B, "
                f"expected ~{expected:.4g} B for {model.n_params:.4g} params"
            )
    return problems


def layer_inventory(model: ModelSpec) -> list[LayerSpec]:
    """Layers in dataflow order: Embedding, decoders by index, LMHead."""
    emb = [layer for layer in model.layers if layer.role is LayerRole.EMBEDDING]
    head = [layer for layer in model.layers if layer.role is LayerRole.LM_HEAD]
    if len(emb) != 1 or len(head) != 1:
        raise ModelStructureError(
            f"{model.name}: need exactly one Embedding and one LMHead "
            f"(found {len(emb)} and {len(head)})"
        )
    decoders = sorted(
        (layer for layer in model.layers if layer.role is LayerRole.DECODER),
        key=lambda layer: layer.index,
    )
    return [emb[0], *decoders, head[0]]


@dataclass(frozen=True)
class WorkloadSpec:
    n_samples: int = 20
    tokens_per_sample: int = 100
    prompt_tokens: int = 128
    quantization: Quantization = Quantization.FP16
    n_queries: int = 1
    latency_sla: float = math.inf
    coverage_min: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "quantization", Quantization(self.quantization))
        problems = validate_workload(self)
        if problems:
            raise ConfigError("; ".join(problems))

    def to_dict(self) -> dict:
        return {
            "n_samples": self.n_samples,
            "tokens_per_sample": self.tokens_per_sample,
            "prompt_tokens": self.prompt_tokens,
            "quantization": self.quantization.value,
            "n_queries": self.n_queries,
            "latency_sla": self.latency_sla if math.isfinite(self.latency_sla) else None,
            "coverage_min": self.coverage_min,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "WorkloadSpec":
        d = dict(d)
        if d.get("latency_sla") is None:
            d.pop("latency_sla", None)
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(f"workload: {exc}") from exc


def validate_workload(w: WorkloadSpec) -> list[str]:
    problems = []
    if w.n_samples < 1:
        problems.append("n_samples must be >= 1")
    if w.tokens_per_sample < 1:
        problems.append("tokens_per_sample must be >= 1")
    if w.prompt_tokens < 0:
        problems.append("prompt_tokens must be >= 0")
    if w.n_queries < 0:
        problems.append("n_queries must be >= 0")
    if not 0.0 <= w.coverage_min <= 1.0:
        problems.append("coverage_min must lie in [0, 1]")
    if not w.latency_sla > 0:
        problems.append("latency_sla must be > 0")
    return problems


def _finite_or_none(x: float) -> Optional[float]:
    return x if math.isfinite(x) else None


def _none_to_nan(x: Optional[float]) -> float:
    return math.nan if x is None else x


@dataclass(frozen=True)
class AllocationPlan:
    """Layer-to-device assignment with its predicted cost.

    ``assignment`` maps layer keys (``embedding``, ``decoder.<i>``, ``lmhead``)
    to device ids, in dataflow order. Energy is joules per query, latency is
    seconds per query, power is the summed busy draw of the devices in use.
    Infeasible plans may leave layers unassigned.
    """

    assignment: Mapping[str, str]
    predicted_energy: float
    predicted_latency: float
    predicted_power: float
    per_device_mem: Mapping[str, float]
    safety_status: SafetyStatus = SafetyStatus.OK

    def __post_init__(self):
        object.__setattr__(self, "assignment", dict(self.assignment))
        object.__setattr__(self, "per_device_mem", dict(self.per_device_mem))
        object.__setattr__(self, "safety_status", SafetyStatus(self.safety_status))

    @property
    def feasible(self) -> bool:
        return self.safety_status is not SafetyStatus.INFEASIBLE

    @property
    def devices_used(self) -> list[str]:
        out = []
        for dev in self.assignment.values():
            if dev not in out:
                out.append(dev)
        return out

    @property
    def heterogeneous(self) -> bool:
        return len(self.devices_used) > 1

    def layers_on(self, device_id: str) -> list[str]:
        return [k for k, v in self.assignment.items() if v == device_id]

    def to_dict(self) -> dict:
        return {
            "assignment": [{"layer": k, "device": v} for k, v in self.assignment.items()],
            "predicted_energy_j": _finite_or_none(self.predicted_energy),
            "predicted_latency_s": _finite_or_none(self.predicted_latency),
            "predicted_power_w": _finite_or_none(self.predicted_power),
            "per_device_mem": dict(self.per_device_mem),
            "safety_status": self.safety_status.value,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "AllocationPlan":
        return cls(
            assignment={row["layer"]: row["device"] for row in d["assignment"]},
            predicted_energy=_none_to_nan(d["predicted_energy_j"]),
            predicted_latency=_none_to_nan(d["predicted_latency_s"]),
            predicted_power=_none_to_nan(d["predicted_power_w"]),
            per_device_mem=d["per_device_mem"],
            safety_status=d["safety_status"],
        )
