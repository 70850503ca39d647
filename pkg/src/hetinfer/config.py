"""Scenario files, reference resolution and atomic output writing.

A reference is ``preset:<name>``, a path to a TOML file (relative paths are
resolved against the referring file), an inline table, or a bare preset name.
"""

from __future__ import annotations

import dataclasses
import os
import sys
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Optional, Union

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import presets
from .core import ConfigError, DeviceFleet, ModelSpec, Quantization, WorkloadSpec
from .safety import GuardrailPolicy, ThermalPolicy
from .scaling import CostParams, ScalingParams
from .simulator import FaultScript, ThermalModel

SCENARIO_KEYS = {
    "fleet", "model", "workload", "params", "cost", "faults", "seed", "out", "governor",
    "horizon", "thermal", "thermal_policy", "guardrails", "sweep", "precision",
}
THERMAL_MODEL_KEYS = {"idle_fraction", "hw_throttle_factor", "hw_release_margin"}


def load_toml(path: Union[str, Path]) -> dict:
    path = Path(path)
    try:
        with path.open("rb") as fh:
            return tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"{path}: file not found") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from None


def build_dataclass(cls, d: Mapping, where: str):
    """Instantiate a flat dataclass from a table, rejecting unknown keys."""
    names = {f.name for f in dataclasses.fields(cls)}
    extra = set(d) - names
    if extra:
        raise ConfigError(f"{where}: unknown keys {sorted(extra)}")
    try:
        return cls(**d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def _scaling_params(d: Mapping) -> ScalingParams:
    return ScalingParams.from_dict(d)


_PARSERS = {
    "fleet": DeviceFleet.from_dict,
    "model": ModelSpec.from_dict,
    "workload": WorkloadSpec.from_dict,
    "params": _scaling_params,
    "faults": FaultScript.from_dict,
}


def _preset(kind: str, name: str, precision: Quantization):
    try:
        if kind == "fleet":
            return presets.fleet(name)
        if kind == "model":
            return presets.model(name, precision)
        if kind == "workload":
            return presets.workload(name)
        if kind == "params" and name == "default":
            return ScalingParams()
    except KeyError as exc:
        raise ConfigError(exc.args[0]) from None
    raise ConfigError(f"no {kind} preset named {name!r}")


def _has_preset(kind: str, name: str) -> bool:
    table = {"fleet": presets.FLEETS, "model": presets.MODEL_TABLE, "workload": presets.WORKLOADS, "params": {"default"}}
    return name in table.get(kind, ())


def resolve(kind: str, ref: Any, base: Path = Path("."), precision: Quantization = Quantization.FP16):
    """Turn a reference into a fleet, model, workload, params or fault script."""
    if isinstance(ref, Mapping):
        try:
            return _PARSERS[kind](ref)
        except ConfigError as exc:
            raise ConfigError(f"inline {kind}: {exc}") from None
    if not isinstance(ref, str):
        raise ConfigError(f"{kind}: expected a reference string or table, got {type(ref).__name__}")
    if ref.startswith("preset:"):
        return _preset(kind, ref[len("preset:"):], precision)
    path = (base / ref) if not Path(ref).is_absolute() else Path(ref)
    if path.exists():
        data = load_toml(path)
        try:
            return _PARSERS[kind](data)
        except ConfigError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    if _has_preset(kind, ref):
        return _preset(kind, ref, precision)
    raise ConfigError(f"{kind}: {path}: file not found (and no preset named {ref!r})")


@dataclass
class Scenario:
    fleet: DeviceFleet
    model: ModelSpec
    workload: WorkloadSpec
    params: ScalingParams = field(default_factory=ScalingParams)
    cost: CostParams = field(default_factory=CostParams)
    faults: FaultScript = field(default_factory=FaultScript)
    thermal_overrides: dict = field(default_factory=dict)
    thermal_options: dict = field(default_factory=dict)
    thermal_policy: ThermalPolicy = field(default_factory=ThermalPolicy)
    guardrails: GuardrailPolicy = field(default_factory=GuardrailPolicy)
    seed: int = 0
    governor: bool = True
    horizon: Optional[float] = None
    out: Optional[str] = None
    sweep: dict = field(default_factory=dict)
    source: str = "<flags>"

    def thermal_model(self) -> ThermalModel:
        unknown = set(self.thermal_overrides) - set(self.fleet.ids)
        if unknown:
            raise ConfigError(f"{self.source}: thermal: unknown device(s) {sorted(unknown)}")
        for dev, o in self.thermal_overrides.items():
            extra = set(o) - {"r_th", "tau_th", "t_ambient"}
            if extra:
                raise ConfigError(f"{self.source}: thermal.{dev}: unknown keys {sorted(extra)}")
        try:
            return ThermalModel.for_fleet(self.fleet, self.thermal_overrides, **self.thermal_options)
        except (ConfigError, TypeError) as exc:
            raise ConfigError(f"{self.source}: thermal: {exc}") from None


def load_scenario(path: Optional[Union[str, Path]] = None, **overrides) -> Scenario:
    """Read a scenario file (optional) and apply non-None keyword overrides.

    Keyword overrides use the scenario keys (fleet, model, workload, params,
    faults, seed, out, governor, horizon) and take precedence over the file.
    """
    data: dict = {}
    base = Path(".")
    source = "<flags>"
    if path is not None:
        path = Path(path)
        data = load_toml(path)
        base = path.parent
        source = str(path)
        extra = set(data) - SCENARIO_KEYS
        if extra:
            raise ConfigError(f"{path}: unknown keys {sorted(extra)}")
    flag_keys = {k for k, v in overrides.items() if v is not None}
    for k in flag_keys:
        data[k] = overrides[k]

    def where(key: str) -> Path:
        # Flag values are relative to the working directory.
        return Path(".") if key in flag_keys else base

    def loc(key: str) -> str:
        return "command line" if key in flag_keys else source

    try:
        precision = Quantization(data.get("precision", "FP16"))
    except ValueError:
        raise ConfigError(f"{loc('precision')}: precision: expected FP16 or FP8") from None
    try:
        workload = resolve("workload", data.get("workload", "preset:standard"), where("workload"))
        if "precision" not in data:
            precision = workload.quantization
        sc = Scenario(
            fleet=resolve("fleet", data.get("fleet", "preset:reference"), where("fleet")),
            model=resolve("model", data.get("model", "preset:gpt2"), where("model"), precision),
            workload=workload,
            source=source,
        )
        if "params" in data:
            sc.params = resolve("params", data["params"], where("params"))
        if "faults" in data:
            sc.faults = resolve("faults", data["faults"], where("faults"))
    except ConfigError as exc:
        msg = str(exc)
        raise ConfigError(msg if msg.startswith(source) else f"{source}: {msg}") from None

    if "cost" in data:
        try:
            sc.cost = CostParams.from_dict(data["cost"])
        except ConfigError as exc:
            raise ConfigError(f"{loc('cost')}: cost: {exc}") from None
    thermal = dict(data.get("thermal", {}))
    sc.thermal_options = {k: thermal.pop(k) for k in list(thermal) if k in THERMAL_MODEL_KEYS}
    for dev, o in thermal.items():
        if not isinstance(o, Mapping):
            raise ConfigError(f"{source}: thermal.{dev}: expected a table")
    sc.thermal_overrides = thermal
    if "thermal_policy" in data:
        sc.thermal_policy = build_dataclass(ThermalPolicy, data["thermal_policy"], f"{source}: thermal_policy")
    if "guardrails" in data:
        sc.guardrails = build_dataclass(GuardrailPolicy, data["guardrails"], f"{source}: guardrails")
    seed = data.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool):
        raise ConfigError(f"{loc('seed')}: seed: expected an integer")
    sc.seed = seed
    gov = data.get("governor", True)
    if isinstance(gov, str):
        if gov not in ("on", "off"):
            raise ConfigError(f"{loc('governor')}: governor: expected on or off")
        gov = gov == "on"
    sc.governor = bool(gov)
    if data.get("horizon") is not None:
        h = data["horizon"]
        if not isinstance(h, (int, float)) or not h > 0:
            raise ConfigError(f"{loc('horizon')}: horizon: expected a positive number of seconds")
        sc.horizon = float(h)
    sc.out = data.get("out")
    sweep = data.get("sweep", {})
    if not isinstance(sweep, Mapping):
        raise ConfigError(f"{source}: sweep: expected a table")
    extra = set(sweep) - {"samples", "subsets", "governors"}
    if extra:
        raise ConfigError(f"{source}: sweep: unknown keys {sorted(extra)}")
    sc.sweep = dict(sweep)
    return sc


def write_atomic(path: Union[str, Path], text: str) -> Path:
    """Write via a temp file in the same directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except FileNotFoundError:
            pass
        raise
    return path
