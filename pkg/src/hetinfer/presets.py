"""Built-in fleets, models and workloads so sweeps run with zero configuration.

Capacities, bandwidths and power caps of the reference fleet are the published
platform figures. Core counts and clocks of the accelerators are not published;
the values below are plausible round numbers, chosen so the NVIDIA card has the
compute-to-bandwidth ratio of a 900 GB/s part (C/B ~ 11).
"""

from __future__ import annotations

from .core import (
    GB,
    DeviceFleet,
    DeviceKind,
    DeviceSpec,
    ModelSpec,
    Quantization,
    WorkloadSpec,
    build_model,
)

REFERENCE_DEVICES = (
    DeviceSpec(
        id="cpu",
        kind=DeviceKind.CPU,
        vendor="Intel",
        mem_max=127 * GB,
        bandwidth=100 * GB,
        frequency=2.8e9,
        power_peak=45.0,
        n_cores=8,
        lam=1.0,
        t_max=100.0,
        priority=3,
    ),
    DeviceSpec(
        id="npu",
        kind=DeviceKind.NPU,
        vendor="Intel",
        mem_max=20 * GB,
        bandwidth=50 * GB,
        frequency=1.4e9,
        power_peak=25.0,
        n_cores=1024,
        lam=0.15,
        t_max=100.0,
        priority=2,
    ),
    DeviceSpec(
        id="gpu_nvidia",
        kind=DeviceKind.GPU,
        vendor="NVIDIA",
        mem_max=96.2 * GB,
        bandwidth=900 * GB,
        frequency=2.5e9,
        power_peak=300.0,
        n_cores=2000,
        lam=0.4,
        t_max=100.0,
        priority=0,
    ),
    DeviceSpec(
        id="gpu_intel",
        kind=DeviceKind.GPU,
        vendor="Intel",
        mem_max=72.7 * GB,
        bandwidth=120 * GB,
        frequency=2.0e9,
        power_peak=300.0,
        n_cores=512,
        lam=0.4,
        t_max=100.0,
        priority=1,
    ),
)

# name -> (n_params, n_decoders, hidden, vocab)
MODEL_TABLE = {
    "gpt2": (125e6, 12, 768, 50257),
    "granite-350m": (350e6, 28, 1024, 49152),
    "qwen2-0.5b": (500e6, 24, 896, 151936),
    "llama-3.2-1b": (1.0e9, 16, 2048, 128256),
    "lfm2-2.6b": (2.6e9, 30, 2048, 65536),
}

WORKLOADS = {
    # S=20 samples of T=100 tokens: S*T = 2000 tokens per query.
    "standard": WorkloadSpec(n_samples=20, tokens_per_sample=100, prompt_tokens=128, n_queries=1),
    "sweep": WorkloadSpec(n_samples=20, tokens_per_sample=100, prompt_tokens=128, n_queries=200),
    "sustained": WorkloadSpec(
        n_samples=4, tokens_per_sample=1024, prompt_tokens=2048, n_queries=100000
    ),
}


def reference_fleet() -> DeviceFleet:
    return DeviceFleet(REFERENCE_DEVICES, name="reference")


FLEETS = {
    "reference": reference_fleet,
    "cpu": lambda: reference_fleet().subset(["cpu"]),
    "npu": lambda: reference_fleet().subset(["npu"]),
    "gpu": lambda: reference_fleet().subset(["gpu_nvidia"]),
}


def fleet(name: str) -> DeviceFleet:
    try:
        return FLEETS[name]()
    except KeyError:
        raise KeyError(f"unknown fleet preset {name!r}; known: {sorted(FLEETS)}") from None


def model(name: str, precision: Quantization | str = Quantization.FP16) -> ModelSpec:
    try:
        n, layers, hidden, vocab = MODEL_TABLE[name]
    except KeyError:
        raise KeyError(f"unknown model preset {name!r}; known: {sorted(MODEL_TABLE)}") from None
    return build_model(name, n, layers, hidden, vocab, precision=precision)


def workload(name: str) -> WorkloadSpec:
    try:
        return WORKLOADS[name]
    except KeyError:
        raise KeyError(f"unknown workload preset {name!r}; known: {sorted(WORKLOADS)}") from None
