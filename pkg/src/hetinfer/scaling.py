"""Closed-form evaluators for coverage, energy, latency, cost and roofline fit.

Everything here is a pure function of immutable inputs.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, fields
from typing import Iterable, Mapping

from .core import ConfigError, DeviceSpec, ModelSpec, Quantization, WorkloadSpec

# Reference point for the default calibrations: the 125M-parameter model run
# homogeneously on the 45 W CPU at S=20, T=100 in FP16.
CALIB_N = 125e6
CALIB_S = 20
CALIB_T = 100
CALIB_POWER = 45.0
CALIB_LAMBDA = 1.0
CALIB_ENERGY_J = 43_057.7
CALIB_COVERAGE = 0.595

DEFAULT_BETA_N = 0.70
DEFAULT_BETA_S = 0.70
DEFAULT_DELTA = 0.20
DEFAULT_GAMMA_E = 0.90
DEFAULT_GAMMA_UTIL = 0.75


def calibrate_alpha(
    target: float,
    n_params: float,
    n_samples: float,
    tokens: float,
    beta_n: float = DEFAULT_BETA_N,
    beta_s: float = DEFAULT_BETA_S,
    delta: float = DEFAULT_DELTA,
) -> float:
    """Solve coverage(N, S, T) = target for alpha."""
    if not 0.0 < target < 1.0:
        raise ValueError(f"target coverage must lie in (0, 1), got {target}")
    return -math.log1p(-target) / (n_params**beta_n * n_samples**beta_s * tokens**delta)


def calibrate_c1(
    target_joules: float,
    n_params: float,
    n_samples: float,
    tokens: float,
    power: float,
    lam: float = 1.0,
    f_q: float = 1.0,
    gamma_e: float = DEFAULT_GAMMA_E,
    gamma_util: float = DEFAULT_GAMMA_UTIL,
) -> float:
    """Solve energy(...) = target_joules for c1 (energy is linear in c1)."""
    return target_joules / (n_params**gamma_e * f_q * power * gamma_util * lam * tokens * n_samples)


DEFAULT_ALPHA = calibrate_alpha(CALIB_COVERAGE, CALIB_N, CALIB_S, CALIB_T)
DEFAULT_C1 = calibrate_c1(CALIB_ENERGY_J, CALIB_N, CALIB_S, CALIB_T, CALIB_POWER, CALIB_LAMBDA)


def _default_fq() -> dict:
    return {Quantization.FP16: 1.0, Quantization.FP8: 0.65}


@dataclass(frozen=True)
class ScalingParams:
    """Constants of the coverage, energy and latency laws.

    ``alpha`` and ``c1`` default to values calibrated on the reference point
    above (see ``calibrate_alpha`` / ``calibrate_c1``). ``overhead_alpha`` is
    the per-log-sample coordination cost, unrelated to the coverage ``alpha``.
    """

    alpha: float = DEFAULT_ALPHA
    beta_n: float = DEFAULT_BETA_N
    beta_s: float = DEFAULT_BETA_S
    delta: float = DEFAULT_DELTA
    c1: float = DEFAULT_C1
    gamma_e: float = DEFAULT_GAMMA_E
    f_q: Mapping[Quantization, float] = field(default_factory=_default_fq)
    gamma_util: float = DEFAULT_GAMMA_UTIL
    overhead_const: float = 0.4e-3
    overhead_alpha: float = 0.05e-3
    log_base: float = math.e
    b0: float = 100e9

    def __post_init__(self):
        try:
            fq = {Quantization(k): float(v) for k, v in dict(self.f_q).items()}
        except ValueError as exc:
            raise ConfigError(f"f_q: {exc}") from exc
        object.__setattr__(self, "f_q", fq)
        problems = []
        if not self.alpha >= 0:
            problems.append("alpha must be >= 0")
        for name in ("beta_n", "beta_s"):
            if not 0 < getattr(self, name) < 1:
                problems.append(f"{name} must lie in (0, 1)")
        if not 0 < self.gamma_e <= 1:
            problems.append("gamma_e must lie in (0, 1]")
        if not 0 < self.gamma_util <= 1:
            problems.append("gamma_util must lie in (0, 1]")
        if any(not 0 < v <= 1 for v in fq.values()):
            problems.append("f_q values must lie in (0, 1]")
        if self.c1 < 0 or self.overhead_const < 0 or self.overhead_alpha < 0:
            problems.append("c1 and overhead constants must be >= 0")
        if not self.b0 > 0:
            problems.append("b0 must be > 0")
        if not (self.log_base > 0 and self.log_base != 1):
            problems.append("log_base must be positive and != 1")
        if problems:
            raise ConfigError("scaling params: " + "; ".join(problems))

    def to_dict(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in fields(self)}
        out["f_q"] = {k.value: v for k, v in self.f_q.items()}
        return out

    @classmethod
    def from_dict(cls, d: Mapping) -> "ScalingParams":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"scaling params: unknown keys {sorted(extra)}")
        d = dict(d)
        if "f_q" in d:
            merged = _default_fq()
            merged.update({Quantization(k): v for k, v in d["f_q"].items()})
            d["f_q"] = merged
        return cls(**d)

    def replace(self, **changes) -> "ScalingParams":
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d.update(changes)
        return ScalingParams(**d)


@dataclass(frozen=True)
class CostParams:
    hw_cost: float = 3000.0
    device_lifetime_ops: float = 1e8
    price_kwh: float = 0.15
    maint_const: float = 1e-6

    def __post_init__(self):
        if min(self.hw_cost, self.price_kwh, self.maint_const) < 0:
            raise ConfigError("cost params must be >= 0")
        if not self.device_lifetime_ops > 0:
            raise ConfigError("device_lifetime_ops must be > 0")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: Mapping) -> "CostParams":
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(f"cost params: {exc}") from exc


def coverage(params: ScalingParams, n_params: float, n_samples: float, tokens: float) -> float:
    """1 - exp(-alpha N^bN S^bS T^d), clamped to [0, 1]."""
    if n_samples <= 0 or params.alpha == 0:
        return 0.0
    try:
        x = params.alpha * n_params**params.beta_n * n_samples**params.beta_s * tokens**params.delta
    except OverflowError:
        return 1.0
    if math.isinf(x):
        return 1.0
    return min(1.0, max(0.0, -math.expm1(-x)))


def quant_factor(params: ScalingParams, quant) -> float:
    try:
        return params.f_q[Quantization(quant)]
    except (ValueError, KeyError):
        raise ConfigError(f"unknown quantization {quant!r}") from None


def energy(
    params: ScalingParams,
    device: DeviceSpec,
    n_params: float,
    n_samples: float,
    tokens: float,
    quant=Quantization.FP16,
) -> float:
    """c1 N^gE f(Q) P gamma_util lambda T S, in joules."""
    fq = quant_factor(params, quant)
    return (
        params.c1
        * n_params**params.gamma_e
        * fq
        * device.power_peak
        * params.gamma_util
        * device.lam
        * tokens
        * n_samples
    )


@dataclass(frozen=True)
class LatencyBreakdown:
    prefill: float
    decode: float
    io: float
    overhead: float

    @property
    def total(self) -> float:
        return self.prefill + self.decode + self.io + self.overhead

    def to_dict(self) -> dict:
        return {
            "prefill": self.prefill,
            "decode": self.decode,
            "io": self.io,
            "overhead": self.overhead,
            "total": self.total,
        }


def overhead_time(params: ScalingParams, n_samples: float) -> float:
    return params.overhead_const + params.overhead_alpha * math.log(max(n_samples, 1), params.log_base)


def io_time(io_transfers: Iterable[tuple[float, float]]) -> float:
    total = 0.0
    for nbytes, bw in io_transfers:
        if not bw > 0:
            raise ValueError(f"transfer of {nbytes} B over non-positive bandwidth {bw}")
        total += nbytes / bw
    return total


def prefill_time(params, device, model, workload, flop_share=1.0) -> float:
    return workload.prompt_tokens * model.flops_per_token_total * flop_share / device.compute


def decode_time(params, device, model, workload, flop_share=1.0) -> float:
    speedup = device.bandwidth / params.b0
    work = (workload.n_samples - 1) * workload.tokens_per_sample * model.flops_per_token_total
    return work * flop_share / (device.compute * speedup)


def latency(
    params: ScalingParams,
    device: DeviceSpec,
    model: ModelSpec,
    workload: WorkloadSpec,
    io_transfers: Iterable[tuple[float, float]] = (),
    heterogeneous: bool = False,
    flop_share: float = 1.0,
) -> LatencyBreakdown:
    """Latency of ``flop_share`` of the model's work on one device.

    Prefill divides the prompt FLOPs by peak throughput C = 2 f n_cores;
    decode scales that throughput by B/B0 for the memory-bound phase.
    """
    if not device.bandwidth > 0:
        raise ValueError(f"{device.id}: bandwidth must be > 0")
    return LatencyBreakdown(
        prefill=prefill_time(params, device, model, workload, flop_share),
        decode=decode_time(params, device, model, workload, flop_share),
        io=io_time(io_transfers),
        overhead=overhead_time(params, workload.n_samples) if heterogeneous else 0.0,
    )


@dataclass(frozen=True)
class CostBreakdown:
    amort: float
    energy_cost: float
    maint: float

    @property
    def total(self) -> float:
        return self.amort + self.energy_cost + self.maint

    def to_dict(self) -> dict:
        return {
            "amort": self.amort,
            "energy_cost": self.energy_cost,
            "maint": self.maint,
            "total": self.total,
        }


JOULES_PER_KWH = 3.6e6


def cost(costp: CostParams, energy_joules: float, n_samples: float) -> CostBreakdown:
    return CostBreakdown(
        amort=costp.hw_cost / costp.device_lifetime_ops * n_samples,
        energy_cost=energy_joules / JOULES_PER_KWH * costp.price_kwh,
        maint=costp.maint_const * n_samples,
    )


class RooflineClass(str, enum.Enum):
    MEMORY_BOUND = "MemoryBound"
    COMPUTE_BOUND = "ComputeBound"
    BALANCED = "Balanced"


def ridge_point(device: DeviceSpec) -> float:
    return device.compute / device.bandwidth


def roofline_class(intensity: float, device: DeviceSpec, eps: float = 0.05) -> RooflineClass:
    ridge = ridge_point(device)
    if intensity < ridge * (1 - eps):
        return RooflineClass.MEMORY_BOUND
    if intensity > ridge * (1 + eps):
        return RooflineClass.COMPUTE_BOUND
    return RooflineClass.BALANCED

