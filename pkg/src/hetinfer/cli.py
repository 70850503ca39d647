"""Command-line front end: plan, simulate, fit and sweep.

Exit codes: 0 success, 1 input error, 2 infeasible, 3 insufficient data.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import itertools
import json
import os
import sys
import warnings
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Optional, Sequence

from . import lawfit, metrics, planner, simulator
from .config import ConfigError, Scenario, load_scenario, write_atomic
from .core import DeviceKind

EXIT_OK = 0
EXIT_INPUT = 1
EXIT_INFEASIBLE = 2
EXIT_INSUFFICIENT = 3

OUT_ENV = "HETINFER_OUT"
DEFAULT_OUT = "hetinfer-out"

ABLATION_COLUMNS = [
    "configuration", "subset", "n_samples", "governor", "feasible",
    "pass_at_k_pct", "energy_kj", "latency_ms", "ipw", "power_w", "ppp",
    "energy_per_token_j", "throughput_tok_s", "threshold_crossings",
]


class Infeasible(Exception):
    pass


def _out_dir(args, sc: Optional[Scenario] = None) -> Path:
    return Path(args.out or (sc.out if sc else None) or os.environ.get(OUT_ENV) or DEFAULT_OUT)


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=1, allow_nan=False, default=str) + "\n"


def _scenario(args) -> Scenario:
    return load_scenario(
        args.scenario,
        fleet=args.fleet,
        model=args.model,
        workload=args.workload,
        params=args.params,
        faults=getattr(args, "faults", None),
        seed=args.seed,
        governor=getattr(args, "governor", None),
        horizon=getattr(args, "horizon", None),
    )


def _request(sc: Scenario, fleet=None, workload=None) -> planner.PlanRequest:
    req = planner.PlanRequest(fleet or sc.fleet, sc.model, workload or sc.workload, sc.params)
    problems = req.problems()
    if problems:
        raise ConfigError(f"{sc.source}: " + "; ".join(problems))
    return req


def _write_plan(out: Path, plan, diag) -> None:
    write_atomic(out / "plan.json", _dump(plan.to_dict()))
    write_atomic(out / "diagnostics.json", _dump(diag.to_dict()))


def _plan_line(plan) -> str:
    if not plan.feasible:
        return f"plan: {plan.safety_status.value}"
    return (
        f"plan: {plan.safety_status.value}  devices={','.join(plan.devices_used)}  "
        f"energy={plan.predicted_energy:.1f} J  latency={plan.predicted_latency * 1e3:.2f} ms"
    )


def cmd_plan(args) -> int:
    sc = _scenario(args)
    req = _request(sc)
    if args.planner == "exhaustive":
        plan = planner.brute_force_plan(req)
        _, diag = planner.greedy_plan(req)
    else:
        plan, diag = planner.greedy_plan(req)
    out = _out_dir(args, sc)
    _write_plan(out, plan, diag)
    print(_plan_line(plan))
    for c in diag.constraint_report:
        if not c.satisfied:
            print(f"  violated: {c.name} (slack {c.slack:.4g})")
    if diag.unplaced_layers:
        print(f"  unplaced: {', '.join(diag.unplaced_layers)}")
    return EXIT_OK if plan.feasible else EXIT_INFEASIBLE


def _write_run(out: Path, report: simulator.SimReport, req, sc: Scenario) -> metrics.MetricSet:
    ms = metrics.compute_metrics(report, req, sc.cost)
    write_atomic(out / "report.json", report.to_json())
    write_atomic(out / "temperature.csv", report.temperature_csv())
    write_atomic(out / "utilization.csv", report.utilization_csv())
    write_atomic(out / "events.jsonl", report.events_jsonl())
    write_atomic(out / "metrics.json", ms.to_json() + "\n")
    write_atomic(out / "metrics.csv", ms.to_csv())
    return ms


def _run(sc: Scenario, req, plan, governor: Optional[bool] = None) -> simulator.SimReport:
    try:
        return simulator.simulate(
            plan, req,
            thermal=sc.thermal_model(),
            policy=sc.thermal_policy,
            guardrails=sc.guardrails,
            faults=sc.faults,
            seed=sc.seed,
            governor=sc.governor if governor is None else governor,
            horizon=sc.horizon,
        )
    except simulator.SimulationRefused as exc:
        raise Infeasible(str(exc)) from None


def _baseline_device(fleet, requested: Optional[str]) -> str:
    if requested:
        if requested not in fleet.ids:
            raise ConfigError(f"--baseline: unknown device {requested!r}; fleet has {list(fleet.ids)}")
        return requested
    gpus = [d.id for d in fleet if d.kind == DeviceKind.GPU]
    return gpus[0] if gpus else planner.rank_devices(fleet)[0][0]


def _delta(base: metrics.MetricSet, new: metrics.MetricSet) -> dict:
    b, n = base.flat(), new.flat()
    out = {}
    for k in sorted(set(b) & set(n)):
        if isinstance(b[k], (int, float)) and isinstance(n[k], (int, float)):
            rel = (n[k] - b[k]) / b[k] if b[k] else None
            out[k] = {"baseline": b[k], "energy_aware": n[k], "delta": n[k] - b[k], "relative": rel}
    return out


def cmd_simulate(args) -> int:
    sc = _scenario(args)
    req = _request(sc)
    out = _out_dir(args, sc)
    plan, diag = planner.greedy_plan(req)
    if not args.compare:
        _write_plan(out, plan, diag)
        print(_plan_line(plan))
        if not plan.feasible:
            return EXIT_INFEASIBLE
        report = _run(sc, req, plan)
        ms = _write_run(out, report, req, sc)
        _print_run(report, ms)
        return EXIT_OK
    dev = _baseline_device(sc.fleet, args.baseline)
    base_plan = planner.homogeneous_plan(req, dev)
    runs = {}
    for label, p in (("baseline", base_plan), ("energy_aware", plan)):
        _write_plan(out / label, p, diag)
        print(f"{label}: {_plan_line(p)}")
        if not p.feasible:
            return EXIT_INFEASIBLE
        report = _run(sc, req, p)
        runs[label] = _write_run(out / label, report, req, sc)
        _print_run(report, runs[label])
    write_atomic(out / "delta.json", _dump({"baseline_device": dev, "metrics": _delta(runs["baseline"], runs["energy_aware"])}))
    return EXIT_OK


def _print_run(report, ms) -> None:
    lat = report.latency_stats()
    print(
        f"  queries {report.n_completed}/{report.n_submitted} (lost {report.n_lost}, rejected {report.n_rejected})  "
        f"energy {report.total_energy:.1f} J  mean latency {lat['mean'] * 1e3:.2f} ms  "
        f"coverage {ms.coverage:.3f}  IPW {ms.ipw:.4g}"
    )


def cmd_fit(args) -> int:
    try:
        curve = lawfit.CoverageCurve.from_csv(args.csv)
    except FileNotFoundError:
        raise ConfigError(f"{args.csv}: file not found") from None
    except (ValueError, KeyError) as exc:
        raise ConfigError(f"{args.csv}: {exc}") from None
    res = lawfit.fit_coverage(curve)
    if args.bootstrap:
        ci = lawfit.bootstrap_ci(curve, args.bootstrap, args.seed, args.jobs)
        res = dataclasses.replace(res, ci_95=ci, n_bootstrap=args.bootstrap)
    doc = res.to_dict()
    if args.ranges:
        doc["sensitivity"] = lawfit.range_sensitivity(curve, _ranges(args.ranges)).to_dict()
    out = _out_dir(args)
    stem = Path(args.csv).stem
    write_atomic(out / f"{stem}.fit.json", _dump(doc))
    summary = res.summary()
    if "sensitivity" in doc and doc["sensitivity"]["delta_beta"] is not None:
        summary += f"\n  delta_beta across ranges: {doc['sensitivity']['delta_beta']:+.4f}"
    write_atomic(out / f"{stem}.fit.txt", summary + "\n")
    print(summary)
    return EXIT_OK


def _ranges(text: str) -> list:
    out = []
    for part in text.split(","):
        try:
            lo, hi = (float(x) for x in part.split("-"))
        except ValueError:
            raise ConfigError(f"--ranges: cannot parse {part!r}; expected LO-HI") from None
        out.append((lo, hi))
    return out


def _subset(fleet, token: str):
    token = token.strip()
    if token == "all":
        return fleet
    kinds = {k.value.lower(): k for k in DeviceKind}
    if token.lower() in kinds:
        ids = [d.id for d in fleet if d.kind == kinds[token.lower()]]
    else:
        ids = token.split("+")
    unknown = [i for i in ids if i not in fleet.ids]
    if unknown or not ids:
        raise ConfigError(f"subset {token!r}: no such device(s) {unknown or token!r} in fleet")
    return fleet.subset(ids)


def _subset_label(token: str) -> str:
    return "heterogeneous" if token == "all" else f"{token}-only"


def _parse_list(text, conv, name):
    if text is None:
        return None
    if isinstance(text, (list, tuple)):
        return [conv(x) for x in text]
    try:
        return [conv(x) for x in str(text).split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"--{name}: cannot parse {text!r}") from None


def _gov(x) -> bool:
    if isinstance(x, bool):
        return x
    if x not in ("on", "off"):
        raise ValueError(x)
    return x == "on"


def _sweep_point(job):
    sc, subset, s, gov, out = job
    fleet = _subset(sc.fleet, subset)
    wl = dataclasses.replace(sc.workload, n_samples=s)
    req = planner.PlanRequest(fleet, sc.model, wl, sc.params)
    plan, diag = planner.greedy_plan(req)
    _write_plan(out, plan, diag)
    row = {"configuration": _subset_label(subset), "subset": subset, "n_samples": s, "governor": "on" if gov else "off"}
    if not plan.feasible:
        return dict(row, feasible=False), None
    sub_sc = dataclasses.replace(sc, fleet=fleet, workload=wl, faults=simulator.FaultScript())
    try:
        report = _run(sub_sc, req, plan, gov)
    except Infeasible:
        return dict(row, feasible=False), None
    ms = _write_run(out, report, req, sub_sc)
    row.update(
        feasible=True,
        pass_at_k_pct=100.0 * ms.coverage,
        energy_kj=ms.energy_per_query / 1e3,
        latency_ms=report.latency_stats()["mean"] * 1e3,
        ipw=ms.ipw,
        power_w=ms.avg_power,
        ppp=ms.ppp,
        energy_per_token_j=ms.energy_per_token,
        throughput_tok_s=ms.throughput,
        threshold_crossings=sum(report.threshold_crossings.values()),
    )
    return row, ms.coverage


def cmd_sweep(args) -> int:
    sc = _scenario(args)
    table = dict(sc.sweep)
    samples = _parse_list(args.samples, int, "samples") or _parse_list(table.get("samples"), int, "samples")
    subsets = _parse_list(args.subsets, str, "subsets") or _parse_list(table.get("subsets"), str, "subsets")
    try:
        governors = _parse_list(args.governors, _gov, "governors") or _parse_list(table.get("governors"), _gov, "governors")
    except ValueError:
        raise ConfigError("governors: expected a list of on/off") from None
    if not (samples or subsets or governors):
        raise ConfigError("empty sweep: give --samples, --subsets or --governors (or a [sweep] table)")
    samples = samples or [sc.workload.n_samples]
    subsets = subsets or ["all"]
    governors = governors or [sc.governor]
    for t in subsets:
        _subset(sc.fleet, t)
    for s in samples:
        if s < 1:
            raise ConfigError(f"samples: {s} is not >= 1")
    out = _out_dir(args, sc)
    jobs = []
    for subset, gov, s in itertools.product(subsets, governors, samples):
        label = f"{subset}_s{s}_gov-{'on' if gov else 'off'}"
        jobs.append((sc, subset, s, gov, out / "points" / label))
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as ex:
            results = list(ex.map(_sweep_point, jobs))
    else:
        results = [_sweep_point(j) for j in jobs]

    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=ABLATION_COLUMNS, lineterminator="\n", restval="")
    w.writeheader()
    for row, _ in results:
        w.writerow(row)
    write_atomic(out / "aggregate.csv", buf.getvalue())

    if len(samples) > 1:
        groups = {}
        for (row, cov), job in zip(results, jobs):
            groups.setdefault((job[1], job[3]), []).append((job[2], cov))
        for (subset, gov), pts in groups.items():
            pts = [(s, c) for s, c in pts if c is not None]
            if len(pts) < 2:
                continue
            name = "coverage_curve.csv" if len(groups) == 1 else f"coverage_curve_{subset}_gov-{'on' if gov else 'off'}.csv"
            curve = lawfit.CoverageCurve.from_points(pts, source=name)
            write_atomic(out / name, curve.to_csv())
    print(buf.getvalue(), end="")
    return EXIT_OK if all(r["feasible"] for r, _ in results) else EXIT_INFEASIBLE


def _common(p: argparse.ArgumentParser, faults: bool = False, sim: bool = False) -> None:
    p.add_argument("--scenario", help="scenario TOML file")
    p.add_argument("--fleet", help="fleet TOML path or preset:NAME (default preset:reference)")
    p.add_argument("--model", help="model TOML path or preset:NAME (default preset:gpt2)")
    p.add_argument("--workload", help="workload TOML path or preset:NAME (default preset:standard)")
    p.add_argument("--params", help="scaling params TOML path or preset:default")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help=f"output directory (default ${OUT_ENV} or ./{DEFAULT_OUT})")
    p.add_argument("--jobs", type=int, default=1)
    if faults:
        p.add_argument("--faults", help="fault script TOML path")
    if sim:
        p.add_argument("--governor", choices=("on", "off"))
        p.add_argument("--horizon", type=float, help="stop admitting queries after this many simulated seconds")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="hetinfer", description="Energy-aware layer placement and inference simulation.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("plan", help="compute a layer-to-device allocation plan")
    _common(p)
    p.add_argument("--planner", choices=("greedy", "exhaustive"), default="greedy")
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("simulate", help="plan and simulate a workload")
    _common(p, faults=True, sim=True)
    p.add_argument("--compare", action="store_true", help="also run a single-device baseline and write delta.json")
    p.add_argument("--baseline", help="device for the --compare baseline (default: first GPU)")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", help="fit the coverage law to a CSV with columns s, coverage")
    p.add_argument("csv")
    p.add_argument("--bootstrap", type=int, default=0, metavar="N")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ranges", help="sensitivity ranges, e.g. 1-10,1-20,5-50")
    p.add_argument("--out")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("sweep", help="run a grid of scenarios")
    _common(p, sim=True)
    p.add_argument("--samples", help="comma-separated sample budgets, e.g. 1,5,10,15,20")
    p.add_argument("--subsets", help="comma-separated subsets: all, cpu, gpu, npu or ID+ID")
    p.add_argument("--governors", help="comma-separated on/off")
    p.set_defaults(func=cmd_sweep)
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INPUT
    if getattr(args, "jobs", 1) < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return EXIT_INPUT
    if getattr(args, "bootstrap", 0) < 0:
        print("error: --bootstrap must be >= 0", file=sys.stderr)
        return EXIT_INPUT
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("always")
            warnings.showwarning = lambda m, *a, **k: print(f"warning: {m}", file=sys.stderr)
            return args.func(args)
    except lawfit.InsufficientData as exc:
        print(f"error: insufficient data: {exc}", file=sys.stderr)
        return EXIT_INSUFFICIENT
    except Infeasible as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (ConfigError, planner.SearchSpaceTooLarge) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
