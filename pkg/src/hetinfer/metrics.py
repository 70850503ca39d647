"""Coverage estimators and composite efficiency metrics.

PPP is defined here, not reproduced: (coverage * throughput)^w1 divided by
(power / 100 W)^w2 * (cost per query / 0.01)^w3. Both normalization units are
artifact choices that keep typical scores in the tens to hundreds.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Optional, Sequence

from . import scaling
from .scaling import CostParams

SCHEMA_VERSION = "1"
PPP_POWER_UNIT = 100.0
PPP_COST_UNIT = 0.01
DEFAULT_KS = (1, 5, 10, 15, 20)


def pass_at_k(n: int, c: int, k: int, estimator: str = "unbiased") -> float:
    """Probability that a k-subset of n samples with c correct has a hit.

    ``unbiased`` is 1 - C(n-c, k) / C(n, k); ``plugin`` is 1 - (1 - c/n)^k.
    """
    if not 0 <= c <= n:
        raise ValueError(f"need 0 <= c <= n, got c={c}, n={n}")
    if not 1 <= k <= n:
        raise ValueError(f"need 1 <= k <= n, got k={k}, n={n}")
    if estimator == "unbiased":
        return 1.0 - math.comb(n - c, k) / math.comb(n, k)
    if estimator == "plugin":
        return 1.0 - (1.0 - c / n) ** k
    raise ValueError(f"unknown estimator {estimator!r}")


def pass_at_k_mean(outcomes: Sequence[Sequence[bool]], k: int, estimator: str = "unbiased") -> float:
    """Arithmetic mean of per-query pass@k over an outcome matrix."""
    if not outcomes:
        raise ValueError("no outcomes")
    vals = [pass_at_k(len(row), sum(bool(x) for x in row), k, estimator) for row in outcomes]
    return math.fsum(vals) / len(vals)


def any_success_rate(outcomes: Sequence[Sequence[bool]], k: int) -> float:
    """Fraction of queries with a success among their first k samples."""
    if not outcomes:
        raise ValueError("no outcomes")
    return sum(any(row[:k]) for row in outcomes) / len(outcomes)


def ipw(coverage_pct: float, avg_power: float) -> float:
    """Coverage in percent per watt."""
    if not avg_power > 0:
        raise ValueError("avg_power must be > 0")
    return coverage_pct / avg_power


def ece(coverage: float, total_energy: float) -> float:
    """Coverage fraction per joule."""
    if not total_energy > 0:
        raise ValueError("total_energy must be > 0")
    return coverage / total_energy


def ppp(
    coverage: float,
    throughput: float,
    avg_power: float,
    cost_per_query: float,
    weights: tuple[float, float, float] = (1.0, 1.0, 1.0),
    power_unit: float = PPP_POWER_UNIT,
    cost_unit: float = PPP_COST_UNIT,
) -> float:
    if not (avg_power > 0 and cost_per_query > 0):
        raise ValueError("avg_power and cost_per_query must be > 0")
    w1, w2, w3 = weights
    num = (coverage * throughput) ** w1
    return num / ((avg_power / power_unit) ** w2 * (cost_per_query / cost_unit) ** w3)


@dataclass(frozen=True)
class Breakdown:
    """Named additive components that should sum to ``total``."""

    label: str
    components: Mapping[str, float]
    total: float


@dataclass(frozen=True)
class BreakdownResult:
    passed: bool
    residuals: dict

    def __bool__(self) -> bool:
        return self.passed


def check_additive(components: Iterable[float], total: float, rel_tol: float = 1e-9) -> tuple[bool, float]:
    """Residual of sum(components) - total, and whether it is within tolerance."""
    residual = math.fsum(components) - total
    return abs(residual) <= rel_tol * max(abs(total), 1e-300), residual


def report_breakdowns(report) -> list[Breakdown]:
    e = report.energy
    out = [
        Breakdown(
            "energy",
            {"prefill": e["prefill"], "decode": e["decode"], "overhead": e["overhead"]},
            e["total"],
        )
    ]
    comp = getattr(report, "latency_components", None)
    if comp:
        out.append(Breakdown("latency", dict(comp), math.fsum(report.query_latencies)))
    return out


def breakdown_check(source, rel_tol: float = 1e-9) -> BreakdownResult:
    """Check additive accounting of a SimReport or of explicit breakdowns."""
    if isinstance(source, Breakdown):
        items = [source]
    elif isinstance(source, (list, tuple)):
        items = list(source)
    else:
        items = report_breakdowns(source)
    residuals = {}
    passed = True
    for b in items:
        ok, res = check_additive(b.components.values(), b.total, rel_tol)
        residuals[b.label] = res
        passed &= ok
    return BreakdownResult(passed, residuals)


@dataclass(frozen=True)
class MetricSet:
    coverage: float
    coverage_source: str
    ipw: float
    ece: float
    ppp: float
    pass_at_k: Mapping[int, float]
    energy_per_token: float
    throughput: float
    avg_power: float
    energy_per_query: float
    cost_per_query: float
    schema_version: str = SCHEMA_VERSION

    def flat(self) -> dict:
        d = {
            "schema_version": self.schema_version,
            "coverage": self.coverage,
            "coverage_source": self.coverage_source,
            "ipw": self.ipw,
            "ece": self.ece,
            "ppp": self.ppp,
            "energy_per_token": self.energy_per_token,
            "throughput": self.throughput,
            "avg_power": self.avg_power,
            "energy_per_query": self.energy_per_query,
            "cost_per_query": self.cost_per_query,
        }
        for k, v in sorted(self.pass_at_k.items()):
            d[f"pass_at_{k}"] = v
        return d

    def to_json(self) -> str:
        return json.dumps(self.flat(), sort_keys=True, indent=1)

    def to_csv(self) -> str:
        row = self.flat()
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=list(row), lineterminator="\n")
        w.writeheader()
        w.writerow(row)
        return buf.getvalue()


def _safe(fn, *args, **kw) -> float:
    try:
        return fn(*args, **kw)
    except ValueError:
        return 0.0


def compute_metrics(
    report,
    req,
    costp: Optional[CostParams] = None,
    weights: tuple[float, float, float] = (1.0, 1.0, 1.0),
    ks: Sequence[int] = DEFAULT_KS,
) -> MetricSet:
    """Metrics of one simulated configuration.

    Coverage is the simulated any-success rate when outcomes were recorded,
    otherwise the coverage law's prediction. ECE and PPP use energy and cost
    per completed query.
    """
    costp = costp or CostParams()
    w = req.workload
    S = w.n_samples
    if report.outcomes:
        cov = any_success_rate(report.outcomes, S)
        source = "simulated"
        kset = sorted({k for k in ks if 1 <= k <= S} | {S})
        pak = {k: pass_at_k_mean(report.outcomes, k) for k in kset}
    else:
        cov = scaling.coverage(req.params, req.model.n_params, S, w.tokens_per_sample)
        source = "model"
        pak = {}
    per_query = report.total_energy / report.n_completed if report.n_completed else 0.0
    cost_q = scaling.cost(costp, per_query, S).total
    return MetricSet(
        coverage=cov,
        coverage_source=source,
        ipw=_safe(ipw, 100.0 * cov, report.avg_power),
        ece=_safe(ece, cov, per_query),
        ppp=_safe(ppp, cov, report.throughput, report.avg_power, cost_q, weights),
        pass_at_k=pak,
        energy_per_token=report.energy_per_token,
        throughput=report.throughput,
        avg_power=report.avg_power,
        energy_per_query=per_query,
        cost_per_query=cost_q,
    )
