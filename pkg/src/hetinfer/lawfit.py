"""Fitting the coverage law C = 1 - exp(-exp(X @ theta)) to measured curves.

The two-parameter curve C(S) = 1 - exp(-a S^b) uses X = [1, ln S] and
theta = (ln a, b). The full law over a grid of (N, T) curves adds ln N and
ln T columns. Both go through the same solver: an exact log-log
linearization for the start point, then damped Gauss-Newton on the
untransformed coverage residuals.
"""

from __future__ import annotations

import csv
import io
import json
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence, Union

import numpy as np

SATURATION_EPS = 1e-9
REL_TOL = 1e-10
MAX_ITER = 200
MIN_POINTS = 3
MAX_BOOTSTRAP_FAILURE = 0.20
_MAX_HALVINGS = 40


class InsufficientData(ValueError):
    """Too few usable points to identify the fitted parameters."""


@dataclass(frozen=True)
class CoverageCurve:
    s: tuple
    coverage: tuple
    weight: Optional[tuple] = None
    source: str = ""

    def __post_init__(self):
        s = tuple(float(x) for x in self.s)
        c = tuple(float(x) for x in self.coverage)
        object.__setattr__(self, "s", s)
        object.__setattr__(self, "coverage", c)
        if len(s) != len(c):
            raise ValueError("s and coverage lengths differ")
        if any(not x > 0 for x in s):
            raise ValueError("sample counts must be > 0")
        if any(b <= a for a, b in zip(s, s[1:])):
            raise ValueError("sample counts must be strictly increasing")
        if any(not 0.0 <= x <= 1.0 for x in c):
            raise ValueError("coverage must lie in [0, 1]")
        if self.weight is not None:
            w = tuple(float(x) for x in self.weight)
            if len(w) != len(s) or any(not x > 0 for x in w):
                raise ValueError("weights must be positive, one per point")
            object.__setattr__(self, "weight", w)

    @classmethod
    def from_points(cls, points, source: str = "") -> "CoverageCurve":
        pts = sorted(points)
        return cls(tuple(p[0] for p in pts), tuple(p[1] for p in pts), source=source)

    @classmethod
    def from_csv(cls, path: Union[str, Path], source: Optional[str] = None) -> "CoverageCurve":
        """Read columns ``s`` and ``coverage`` (optional ``weight``)."""
        path = Path(path)
        return cls.from_csv_text(path.read_text(), path.stem if source is None else source)

    @classmethod
    def from_csv_text(cls, text: str, source: str = "") -> "CoverageCurve":
        rows = list(csv.DictReader(io.StringIO(text)))
        if not rows:
            raise ValueError("no data rows")
        missing = {"s", "coverage"} - set(rows[0])
        if missing:
            raise ValueError(f"missing column(s): {', '.join(sorted(missing))}")
        rows.sort(key=lambda r: float(r["s"]))
        has_w = "weight" in rows[0] and all(r.get("weight") not in (None, "") for r in rows)
        return cls(
            tuple(float(r["s"]) for r in rows),
            tuple(float(r["coverage"]) for r in rows),
            tuple(float(r["weight"]) for r in rows) if has_w else None,
            source=source,
        )

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["s", "coverage"] + (["weight"] if self.weight else []))
        for i, (s, c) in enumerate(zip(self.s, self.coverage)):
            w.writerow([repr(s), repr(c)] + ([repr(self.weight[i])] if self.weight else []))
        return buf.getvalue()

    def restrict(self, s_min: float, s_max: float) -> "CoverageCurve":
        keep = [i for i, s in enumerate(self.s) if s_min <= s <= s_max]
        return CoverageCurve(
            tuple(self.s[i] for i in keep),
            tuple(self.coverage[i] for i in keep),
            tuple(self.weight[i] for i in keep) if self.weight else None,
            source=self.source,
        )

    def __len__(self) -> int:
        return len(self.s)


@dataclass(frozen=True)
class FitResult:
    alpha_hat: float
    beta_hat: float
    r_squared: float
    ci_95: Optional[tuple] = None
    n_bootstrap: int = 0
    n_points: int = 0
    n_dropped: int = 0
    converged: bool = True
    iterations: int = 0
    source: str = ""

    def to_dict(self) -> dict:
        return {
            "source": self.source,
            "alpha_hat": self.alpha_hat,
            "beta_hat": self.beta_hat,
            "r_squared": self.r_squared,
            "ci_95": list(self.ci_95) if self.ci_95 else None,
            "n_bootstrap": self.n_bootstrap,
            "n_points": self.n_points,
            "n_dropped": self.n_dropped,
            "converged": self.converged,
            "iterations": self.iterations,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    def summary(self) -> str:
        """One table-style row: label, beta [low, high], R^2."""
        ci = f"[{self.ci_95[0]:.2f}, {self.ci_95[1]:.2f}]" if self.ci_95 else "[n/a]"
        flag = "" if self.converged else "  (not converged)"
        return f"{self.source or 'curve'}  {self.beta_hat:.2f} {ci}  R2={self.r_squared:.3f}  alpha={self.alpha_hat:.4g}{flag}"


@dataclass(frozen=True)
class _Solution:
    theta: np.ndarray
    converged: bool
    iterations: int


def _predict(X: np.ndarray, theta: np.ndarray) -> np.ndarray:
    return -np.expm1(-np.exp(X @ theta))


def _ssr(X, c, w, theta) -> float:
    r = c - _predict(X, theta)
    return float(np.sum(w * r * r))


def _linear_start(X: np.ndarray, c: np.ndarray, w: np.ndarray) -> np.ndarray:
    inner = (c > 0) & (c < 1)
    if inner.sum() >= X.shape[1]:
        y = np.log(-np.log1p(-c[inner]))
        sw = np.sqrt(w[inner])
        theta, *_ = np.linalg.lstsq(X[inner] * sw[:, None], y * sw, rcond=None)
        if np.all(np.isfinite(theta)):
            return theta
    theta = np.zeros(X.shape[1])
    theta[0] = math.log(-math.log1p(-min(max(float(np.mean(c)), 1e-6), 1 - 1e-6)))
    return theta


def _solve(X: np.ndarray, c: np.ndarray, w: np.ndarray, max_iter: int = MAX_ITER, tol: float = REL_TOL) -> _Solution:
    if np.linalg.matrix_rank(X) < X.shape[1]:
        raise InsufficientData("design is rank deficient (too few distinct points)")
    theta = _linear_start(X, c, w)
    f = _ssr(X, c, w, theta)
    sw = np.sqrt(w)
    for it in range(1, max_iter + 1):
        z = np.exp(X @ theta)
        r = c + np.expm1(-z)
        J = (np.exp(-z) * z)[:, None] * X
        step, *_ = np.linalg.lstsq(J * sw[:, None], r * sw, rcond=None)
        if not np.all(np.isfinite(step)):
            return _Solution(theta, False, it)
        t = 1.0
        for _ in range(_MAX_HALVINGS):
            cand = theta + t * step
            fc = _ssr(X, c, w, cand)
            if fc <= f:
                break
            t *= 0.5
        else:
            # No descent along the Gauss-Newton direction: a numerical
            # minimum if the full step is already negligible.
            small = np.linalg.norm(step) <= 1e-6 * max(np.linalg.norm(theta), 1e-300)
            return _Solution(theta, bool(small), it)
        change = np.linalg.norm(cand - theta)
        theta, f = cand, fc
        if change <= tol * max(np.linalg.norm(theta), 1e-300):
            return _Solution(theta, True, it)
    return _Solution(theta, False, max_iter)


def r_squared(c: Sequence[float], pred: Sequence[float], w: Optional[Sequence[float]] = None) -> float:
    """1 - SS_res / SS_tot on the coverage scale (weighted if w is given)."""
    c = np.asarray(c, float)
    pred = np.asarray(pred, float)
    w = np.ones_like(c) if w is None else np.asarray(w, float)
    mean = np.sum(w * c) / np.sum(w)
    ss_res = float(np.sum(w * (c - pred) ** 2))
    ss_tot = float(np.sum(w * (c - mean) ** 2))
    if ss_tot == 0.0:
        return 1.0 if ss_res == 0.0 else 0.0
    return 1.0 - ss_res / ss_tot


def _usable(s, c, w, warn: bool = True):
    s, c, w = np.asarray(s, float), np.asarray(c, float), np.asarray(w, float)
    keep = c < 1.0 - SATURATION_EPS
    dropped = int((~keep).sum())
    if dropped and warn:
        warnings.warn(f"dropped {dropped} saturated point(s) with coverage >= 1 - {SATURATION_EPS:g}", stacklevel=3)
    return s[keep], c[keep], w[keep], dropped


def _fit_arrays(s, c, w, min_points: int = MIN_POINTS, warn: bool = True):
    s, c, w, dropped = _usable(s, c, w, warn)
    if len(s) < min_points:
        raise InsufficientData(f"need >= {min_points} usable points, got {len(s)}")
    if int((c > 0).sum()) < 2:
        raise InsufficientData("need >= 2 points with nonzero coverage to identify alpha and beta")
    X = np.column_stack([np.ones_like(s), np.log(s)])
    return _solve(X, c, w), s, c, w, X, dropped


def fit_coverage(curve: CoverageCurve, min_points: int = MIN_POINTS) -> FitResult:
    """Least-squares fit of C(S) = 1 - exp(-alpha S^beta).

    ``min_points`` below 3 is only meant for solver tests.
    """
    w = curve.weight if curve.weight else np.ones(len(curve))
    sol, s, c, w, X, dropped = _fit_arrays(curve.s, curve.coverage, w, min_points)
    theta = sol.theta
    return FitResult(
        alpha_hat=float(math.exp(theta[0])),
        beta_hat=float(theta[1]),
        r_squared=r_squared(c, _predict(X, theta), None if curve.weight is None else w),
        n_points=len(s),
        n_dropped=dropped,
        converged=sol.converged,
        iterations=sol.iterations,
        source=curve.source,
    )


def _bootstrap_one(args) -> Optional[float]:
    s, c, w, child = args
    rng = np.random.default_rng(child)
    idx = rng.integers(0, len(s), len(s))
    try:
        sol, *_ = _fit_arrays(s[idx], c[idx], w[idx], warn=False)
    except InsufficientData:
        return None
    b = float(sol.theta[1])
    return b if sol.converged and math.isfinite(b) else None


def bootstrap_betas(curve: CoverageCurve, iterations: int, seed: int, jobs: int = 1) -> list:
    """beta of each resampled refit, None for failed refits."""
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    s, c, w, _ = _usable(curve.s, curve.coverage, curve.weight or np.ones(len(curve)), warn=False)
    children = np.random.SeedSequence(seed).spawn(iterations)
    tasks = [(s, c, w, ch) for ch in children]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            return list(ex.map(_bootstrap_one, tasks, chunksize=max(1, iterations // (4 * jobs))))
    return [_bootstrap_one(t) for t in tasks]


def bootstrap_ci(curve: CoverageCurve, iterations: int = 1000, seed: int = 0, jobs: int = 1) -> Optional[tuple]:
    """Percentile 95% interval of beta over point resamples.

    Returns None when more than 20% of refits fail. The interval is widened
    to contain the full-data estimate if the percentiles miss it.
    """
    betas = bootstrap_betas(curve, iterations, seed, jobs)
    ok = np.array([b for b in betas if b is not None])
    if len(betas) - len(ok) > MAX_BOOTSTRAP_FAILURE * iterations:
        return None
    lo, hi = np.percentile(ok, [2.5, 97.5])
    beta = fit_coverage(curve).beta_hat
    return float(min(lo, beta)), float(max(hi, beta))


def fit_with_ci(curve: CoverageCurve, iterations: int = 1000, seed: int = 0, jobs: int = 1) -> FitResult:
    res = fit_coverage(curve)
    ci = bootstrap_ci(curve, iterations, seed, jobs)
    return FitResult(**{**res.__dict__, "ci_95": ci, "n_bootstrap": iterations})


@dataclass(frozen=True)
class Sensitivity:
    rows: tuple  # ((s_min, s_max), beta_hat)
    delta_beta: Optional[float]

    def to_dict(self) -> dict:
        return {
            "ranges": [{"s_min": r[0], "s_max": r[1], "beta_hat": b} for r, b in self.rows],
            "delta_beta": self.delta_beta,
        }


def range_sensitivity(curve: CoverageCurve, ranges: Sequence[tuple]) -> Sensitivity:
    """Refit on each sample-budget range.

    Ranges with fewer than 3 points are skipped with a warning. delta_beta is
    beta(last range) - beta(first range) after ordering by (s_max, s_min).
    """
    rows = []
    for lo, hi in sorted(ranges, key=lambda r: (r[1], r[0])):
        sub = curve.restrict(lo, hi)
        if len(sub) < MIN_POINTS:
            warnings.warn(f"range [{lo:g}, {hi:g}] has {len(sub)} point(s); skipped", stacklevel=2)
            continue
        rows.append(((float(lo), float(hi)), fit_coverage(sub).beta_hat))
    delta = rows[-1][1] - rows[0][1] if len(rows) >= 2 else None
    return Sensitivity(tuple(rows), delta)


@dataclass(frozen=True)
class GridFit:
    alpha: float
    beta_n: float
    beta_s: float
    delta: float
    r_squared: float
    converged: bool
    fixed: tuple = field(default=())

    def to_dict(self) -> dict:
        return dict(self.__dict__, fixed=list(self.fixed))


def fit_coverage_grid(curves: Mapping[tuple, CoverageCurve]) -> GridFit:
    """Fit all four exponents to curves keyed by (n_params, tokens).

    An exponent whose variable takes a single value is unidentifiable; it is
    fixed at 0 (folded into alpha) and listed in ``fixed``.
    """
    rows = []
    for (n, t), cur in curves.items():
        w = cur.weight or (1.0,) * len(cur)
        for s, c, wi in zip(cur.s, cur.coverage, w):
            rows.append((float(n), float(t), s, c, wi))
    a = np.array(rows, float)
    if a.size == 0:
        raise InsufficientData("no curves")
    n, t, s, c, w = a.T
    keep = c < 1.0 - SATURATION_EPS
    if (~keep).any():
        warnings.warn(f"dropped {int((~keep).sum())} saturated point(s)", stacklevel=2)
    n, t, s, c, w = n[keep], t[keep], s[keep], c[keep], w[keep]
    cols = {"beta_n": np.log(n), "beta_s": np.log(s), "delta": np.log(t)}
    fixed = tuple(k for k, v in cols.items() if np.ptp(v) == 0) if len(c) else tuple(cols)
    free = [k for k in cols if k not in fixed]
    X = np.column_stack([np.ones_like(c)] + [cols[k] for k in free])
    if len(c) < X.shape[1] + 1:
        raise InsufficientData(f"need >= {X.shape[1] + 1} usable points, got {len(c)}")
    sol = _solve(X, c, w)
    est = dict(zip(free, sol.theta[1:]))
    return GridFit(
        alpha=float(math.exp(sol.theta[0])),
        beta_n=float(est.get("beta_n", 0.0)),
        beta_s=float(est.get("beta_s", 0.0)),
        delta=float(est.get("delta", 0.0)),
        r_squared=r_squared(c, _predict(X, sol.theta), w),
        converged=sol.converged,
        fixed=fixed,
    )


def synthetic_curve(alpha: float, beta: float, s_values=(1, 5, 10, 15, 20), noise: float = 0.0, seed: int = 0, source: str = "synthetic") -> CoverageCurve:
    """Model curve, optionally with additive Gaussian noise clipped into [0, 1]."""
    s = np.asarray(s_values, float)
    c = -np.expm1(-alpha * s**beta)
    if noise:
        c = np.clip(c + np.random.default_rng(seed).normal(0.0, noise, len(s)), 0.0, 1.0)
    return CoverageCurve(tuple(s), tuple(c), source=source)


def curve_from_outcomes(outcomes, ks=(1, 5, 10, 15, 20), source: str = "simulated") -> CoverageCurve:
    """Unbiased pass@k curve from a query x sample outcome matrix."""
    from .metrics import pass_at_k_mean

    n = len(outcomes[0])
    ks = [k for k in ks if 1 <= k <= n]
    return CoverageCurve(tuple(ks), tuple(pass_at_k_mean(outcomes, k) for k in ks), source=source)
