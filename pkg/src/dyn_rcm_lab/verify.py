"""Seeded Monte Carlo and exact-kernel checks with explicit error budgets.

Every check is a pure function of its arguments and master seed: replica
``i`` uses the stream ``seed.derive(i)`` and results are reduced in index
order.  Bound checks pass when ``empirical <= bound + 3 SE``; identity checks
when ``|empirical - target| <= 3 SE``; stationarity checks use chi-square
p-values against the threshold 0.001.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from functools import lru_cache

import numpy as np
from scipy import stats

from .environment import (
    DeterministicPhase,
    EnvironmentSpec,
    LazyEnvironment,
    Static,
    TimeWindow,
    infinitesimal_norm,
    reverse_environment,
    sample_environment,
)
from .errors import DomainError
from .kernel import backward_collision_sum, moment_bound, propagate
from .lattice import Lattice
from .parallel import run_replicas
from .seeding import as_seed
from .walker import INF, COLLISION_IDENTITY_RTOL, LazyPointProcess, build_path, collision_stats

PASS, FAIL, INCONCLUSIVE = "pass", "fail", "inconclusive"
SE_MARGIN = 3.0
CHI2_ALPHA = 1e-3
MARKOV_CONSTANT = 25.0


@dataclass
class TestReport:
    name: str
    empirical_value: float
    bound_or_target: float
    standard_error: float
    replicas: int
    verdict: str
    rule: str = "bound"
    metadata: dict = field(default_factory=dict)

    __test__ = False  # not a pytest class

    def to_json(self) -> dict:
        return _jsonable(asdict(self))

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True, indent=2)

    def row(self) -> str:
        return (
            f"{self.name:<36} {self.empirical_value:>12.6g} {self.bound_or_target:>12.6g} "
            f"{self.standard_error:>10.3g} {self.replicas:>8d}  {self.verdict}"
        )


def bound_verdict(empirical: float, bound: float, se: float) -> str:
    return PASS if empirical <= bound + SE_MARGIN * se else FAIL


def identity_verdict(empirical: float, target: float, se: float) -> str:
    return PASS if abs(empirical - target) <= SE_MARGIN * se else FAIL


def report_table(reports) -> str:
    head = f"{'check':<36} {'empirical':>12} {'target':>12} {'SE':>10} {'reps':>8}  verdict"
    return "\n".join([head] + [r.row() for r in reports])


@dataclass
class GrowthCurve:
    horizons: list
    values: list
    ci_halfwidths: list
    fitted_model: str
    fitted_slope: float
    slope_se: float = 0.0
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if any(b <= a for a, b in zip(self.horizons[:-1], self.horizons[1:])):
            raise DomainError("horizons must be strictly increasing")
        if not len(self.values) == len(self.ci_halfwidths) == len(self.horizons):
            raise DomainError("values and CIs must match the horizons")

    def to_json(self) -> dict:
        return _jsonable(asdict(self))

    def to_csv(self) -> str:
        lines = ["horizon,value,ci_halfwidth"]
        lines += [f"{h!r},{v!r},{c!r}" for h, v, c in zip(self.horizons, self.values, self.ci_halfwidths)]
        return "\n".join(lines) + "\n"


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, float) and not math.isfinite(obj):
        return repr(obj)
    return obj


def _mean_se(x) -> tuple[float, float]:
    x = np.asarray(x, dtype=float)
    if len(x) == 0:
        return math.nan, math.nan
    se = float(np.std(x, ddof=1) / math.sqrt(len(x))) if len(x) > 1 else 0.0
    return float(np.mean(x)), se


_MODELS = {
    "log": np.log,
    "sqrt": np.sqrt,
    "linear": lambda h: np.asarray(h, dtype=float),
}


def fit_growth(horizons, values, models=("log", "sqrt", "linear")) -> tuple[str, float, dict]:
    """Least squares ``value = a + b f(h)`` for each model; the smallest residual wins."""
    h = np.asarray(horizons, dtype=float)
    v = np.asarray(values, dtype=float)
    fits = {}
    for name in models:
        x = _MODELS[name](h)
        A = np.column_stack((np.ones_like(x), x))
        coef, *_ = np.linalg.lstsq(A, v, rcond=None)
        resid = float(np.sum((A @ coef - v) ** 2))
        fits[name] = {"intercept": float(coef[0]), "slope": float(coef[1]), "residual": resid}
    best = min(models, key=lambda m: (fits[m]["residual"], models.index(m)))
    return best, fits[best]["slope"], fits


def _slope(x, y) -> float:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    xc = x - x.mean()
    return float(np.dot(xc, y - y.mean()) / np.dot(xc, xc))


def _spec_meta(spec: EnvironmentSpec) -> dict:
    from .environment import kind_to_json

    return {"environment": kind_to_json(spec.kind), "lattice": spec.lattice.to_json()}


# -- jump-count moments -------------------------------------------------------


def _moment_worker(payload, lo, hi):
    spec, base = payload
    out = []
    origin = spec.lattice.origin
    for i in range(lo, hi):
        s = base.derive(i)
        path = build_path(LazyPointProcess(LazyEnvironment(spec, s.derive(0).rng()), s.derive(1).rng()), (origin, 0.0))
        out.append((path.n_jumps, path.boundary_hit, path.exploded_forward or path.exploded_backward))
    return out


@lru_cache(maxsize=8)
def _jump_counts(spec: EnvironmentSpec, replicas: int, seed, threads: int):
    rows = run_replicas(_moment_worker, (spec, as_seed(seed)), replicas, threads)
    n = np.array([r[0] for r in rows], dtype=float)
    hits = int(sum(r[1] for r in rows))
    exploded = int(sum(r[2] for r in rows))
    return n, hits, exploded


def check_moment_bound(spec: EnvironmentSpec, p: int, b: float, replicas: int, seed=0, threads: int = 1) -> TestReport:
    """Monte Carlo ``E[N[0,b]^p]`` for the walk from the origin against the moment bound."""
    if p not in (1, 2):
        raise DomainError("p must be 1 or 2")
    if replicas < 2:
        raise DomainError("need at least 2 replicas")
    if b <= 0:
        raise DomainError("b must be positive")
    norms = [infinitesimal_norm(spec, ell) for ell in range(1, p + 1)]
    bound = moment_bound(p, b, norms)
    seed = as_seed(seed)
    if spec.is_zero:
        n, hits, exploded = np.zeros(replicas), 0, 0
    else:
        n, hits, exploded = _jump_counts(spec.with_window(0.0, float(b)), replicas, seed, threads)
    mean, se = _mean_se(n**p)
    meta = _spec_meta(spec) | {
        "p": p,
        "b": b,
        "seed": seed.to_json(),
        "norms": [nm.to_json() for nm in norms],
        "boundary_hits": hits,
        "exploded": exploded,
    }
    if hits:
        meta["note"] = "some walks reached the proxy box boundary"
    return TestReport(f"moment_bound_p{p}", mean, bound, se, replicas, bound_verdict(mean, bound, se), "bound", meta)


# -- maximal displacement -----------------------------------------------------


def _markov_worker(payload, lo, hi):
    spec, base = payload
    out = []
    origin = spec.lattice.origin
    coords = spec.lattice.coords
    for i in range(lo, hi):
        s = base.derive(i)
        path = build_path(LazyPointProcess(LazyEnvironment(spec, s.derive(0).rng()), s.derive(1).rng()), (origin, 0.0))
        disp = int((coords[path.vertices] ** 2).sum(axis=1).max())
        out.append((disp, path.boundary_hit, path.exploded_forward or path.exploded_backward))
    return out


def check_markov_type(
    spec: EnvironmentSpec, t: float, replicas: int, seed=0, constant: float = MARKOV_CONSTANT, threads: int = 1
) -> TestReport:
    """``E[max_{-t<=s<=t} |X_s - X_0|^2]`` against ``constant * t * ||eta||_1``.

    The walk starts at the origin of a box lattice at time 0.  Non-reversible
    laws (the deterministic phase field) get an informational report.
    """
    if spec.lattice.is_torus:
        raise DomainError("maximal displacement is measured on a box lattice")
    if t <= 0 or replicas < 2:
        raise DomainError("need t > 0 and at least 2 replicas")
    seed = as_seed(seed)
    norm1 = infinitesimal_norm(spec, 1)
    # Monte Carlo norms enter at their upper confidence limit
    bound = constant * t * (norm1.value + norm1.ci_halfwidth)
    if spec.is_zero:
        rows = [(0, False, False)] * replicas
    else:
        rows = run_replicas(_markov_worker, (spec.with_window(-float(t), float(t)), seed), replicas, threads)
    disp = np.array([r[0] for r in rows], dtype=float)
    hits = int(sum(r[1] for r in rows))
    mean, se = _mean_se(disp)
    meta = _spec_meta(spec) | {"t": t, "constant": constant, "norm_1": norm1.to_json(), "seed": seed.to_json()}
    meta["boundary_hits"] = hits
    meta["exploded"] = int(sum(r[2] for r in rows))
    if isinstance(spec.kind, DeterministicPhase):
        verdict, rule = INCONCLUSIVE, "informational"
        meta["note"] = "deterministic phase field is not reversible; the bound is not asserted"
    else:
        verdict, rule = bound_verdict(mean, bound, se), "bound"
    return TestReport(f"markov_type_t{t:g}", mean, bound, se, replicas, verdict, rule, meta)


# -- censored stationarity ----------------------------------------------------


def _stationarity_worker(payload, lo, hi):
    spec, base, times, uniform = payload
    lat = spec.lattice
    out = []
    for i in range(lo, hi):
        s = base.derive(i)
        rng = s.derive(2).rng()
        start = lat.vertex(int(rng.integers(lat.n_vertices))) if uniform else lat.origin
        path = build_path(LazyPointProcess(LazyEnvironment(spec, s.derive(0).rng()), s.derive(1).rng()), (start, 0.0))
        out.append(path.position_ids(times).tolist())
    return out


def check_censored_stationarity(
    spec: EnvironmentSpec, k: int, times, replicas: int, seed=0, start: str = "uniform", threads: int = 1
) -> TestReport:
    """Chi-square uniformity of the censored walk on ``B_k`` at each time.

    ``start="origin"`` is the deliberately non-stationary control.
    """
    if start not in ("uniform", "origin"):
        raise DomainError("start must be 'uniform' or 'origin'")
    times = [float(t) for t in times]
    if not times or min(times) < 0:
        raise DomainError("need non-negative times")
    box = Lattice.box(spec.lattice.dimension, k)
    horizon = max(max(times), 1e-9)
    spec = EnvironmentSpec(spec.kind, box, TimeWindow(0.0, horizon))
    seed = as_seed(seed)
    rows = np.array(
        run_replicas(_stationarity_worker, (spec, seed, times, start == "uniform"), replicas, threads), dtype=np.int64
    ).reshape(replicas, len(times))
    n = box.n_vertices
    pvals, stats_ = [], []
    for j in range(len(times)):
        counts = np.bincount(rows[:, j], minlength=n)
        res = stats.chisquare(counts)
        stats_.append(float(res.statistic))
        pvals.append(float(res.pvalue))
    worst = min(pvals)
    meta = _spec_meta(spec) | {
        "k": k,
        "times": times,
        "start": start,
        "p_values": pvals,
        "chi2_statistics": stats_,
        "cells": n,
        "alpha": CHI2_ALPHA,
        "seed": seed.to_json(),
    }
    verdict = PASS if worst > CHI2_ALPHA else FAIL
    return TestReport(f"censored_stationarity_{start}", worst, CHI2_ALPHA, 0.0, replicas, verdict, "chi_square", meta)


# -- collision growth -----------------------------------------------------------


def _collision_worker(payload, lo, hi):
    spec, base, starts, horizons = payload
    lat = spec.lattice
    out = []
    for i in range(lo, hi):
        s = base.derive(i)
        env = LazyEnvironment(spec, s.derive(0).rng())
        x = build_path(LazyPointProcess(env, s.derive(1).rng()), (starts[0], 0.0))
        y = build_path(LazyPointProcess(env, s.derive(2).rng()), (starts[1], 0.0))
        hit = INF
        if not lat.is_torus:
            for p in (x, y):
                at = np.nonzero(lat.boundary_mask[p.vertices])[0]
                if len(at):
                    idx = int(at[0])
                    hit = min(hit, 0.0 if idx == 0 else float(p.times[idx - 1]))
        counts, errs = [], []
        for T in horizons:
            rec = collision_stats(x, y, TimeWindow(0.0, T))
            counts.append(rec.integer_collisions)
            errs.append(rec.identity_rel_error)
        out.append((counts, max(errs), hit))
    return out


def collision_growth(
    spec: EnvironmentSpec,
    starts,
    horizons,
    replicas: int,
    seed=0,
    threads: int = 1,
    models=("log", "sqrt", "linear"),
    fit_fraction: float = 1.0,
) -> GrowthCurve:
    """Mean integer-time collision counts of two walks in a shared environment.

    Box replicas are dropped from a horizon once either walk has touched the
    boundary by then.  On a torus the growth fit only uses horizons up to
    ``fit_fraction * side**2`` (the diffusive mixing scale).
    """
    if fit_fraction <= 0:
        raise DomainError("fit_fraction must be positive")
    horizons = [float(h) for h in horizons]
    if not horizons or horizons[0] <= 0:
        raise DomainError("horizons must be positive")
    if any(b <= a for a, b in zip(horizons[:-1], horizons[1:])):
        raise DomainError("horizons must be strictly increasing")
    starts = (tuple(starts[0]), tuple(starts[1]))
    seed = as_seed(seed)
    spec = spec.with_window(0.0, horizons[-1])
    rows = run_replicas(_collision_worker, (spec, seed, starts, horizons), replicas, threads)
    counts = np.array([r[0] for r in rows], dtype=float).reshape(replicas, len(horizons))
    identity_err = max((r[1] for r in rows), default=0.0)
    hits = np.array([r[2] for r in rows])
    values, cis, medians, used = [], [], [], []
    for j, T in enumerate(horizons):
        ok = hits > T
        c = counts[ok, j]
        used.append(int(ok.sum()))
        if len(c) == 0:
            values.append(math.nan)
            cis.append(math.nan)
            medians.append(math.nan)
            continue
        m, se = _mean_se(c)
        values.append(m)
        cis.append(SE_MARGIN * se)
        medians.append(float(np.median(c)))
    limit = fit_fraction * spec.lattice.side_length**2 if spec.lattice.is_torus else INF
    finite = [j for j, v in enumerate(values) if math.isfinite(v) and horizons[j] <= limit]
    if len(finite) >= 2:
        model, slope, fits = fit_growth([horizons[j] for j in finite], [values[j] for j in finite], models)
    else:
        model, slope, fits = "none", math.nan, {}
    meta = _spec_meta(spec) | {
        "starts": [list(s) for s in starts],
        "replicas": replicas,
        "replicas_used": used,
        "medians": medians,
        "identity_max_rel_error": identity_err,
        "fits": fits,
        "fit_horizons": [horizons[j] for j in finite],
        "inconclusive_horizons": [horizons[j] for j in range(len(horizons)) if used[j] == 0],
        "seed": seed.to_json(),
    }
    return GrowthCurve(horizons, values, cis, model, slope, 0.0, meta)


# -- backward collision sums ----------------------------------------------------


def _backward_worker(payload, lo, hi):
    spec, base, M = payload
    origin = spec.lattice.origin
    return [backward_collision_sum(sample_environment(spec, base.derive(i)), origin, M) for i in range(lo, hi)]


def backward_sum_divergence(
    spec: EnvironmentSpec, M_list, env_replicas: int, seed=0, fit_range=(10, 200), threads: int = 1
) -> GrowthCurve:
    """Environment-averaged exact backward collision sums ``E[S_m]``.

    The slope of ``S_m`` against ``log m`` over ``fit_range`` is fitted per
    environment and averaged; ``metadata["verdict"]`` is pass when the mean
    curve is strictly increasing and the slope stays positive at 3 SE.
    """
    if not spec.lattice.is_torus:
        raise DomainError("backward sums are computed on tori")
    M_list = [int(m) for m in M_list]
    if not M_list or M_list[0] < 1:
        raise DomainError("M values must be >= 1")
    lo_m, hi_m = int(fit_range[0]), int(fit_range[1])
    M = max(max(M_list), hi_m)
    seed = as_seed(seed)
    spec = spec.with_window(-float(M), 0.0)
    deterministic = isinstance(spec.kind, Static)
    n_env = 1 if deterministic else env_replicas
    sums = np.array(run_replicas(_backward_worker, (spec, seed, M), n_env, threads))
    ms = np.arange(lo_m, hi_m + 1)
    slopes = np.array([_slope(np.log(ms), S[ms - 1]) for S in sums])
    slope, slope_se = _mean_se(slopes)
    if n_env == 1:
        slope_se = 0.0
    values, cis = [], []
    for m in M_list:
        v, se = _mean_se(sums[:, m - 1])
        values.append(v)
        cis.append(SE_MARGIN * (se if n_env > 1 else 0.0))
    mean_curve = sums.mean(axis=0)
    increasing = bool(np.all(np.diff(mean_curve) > 0))
    positive = slope - SE_MARGIN * slope_se > 0
    meta = _spec_meta(spec) | {
        "env_replicas": n_env,
        "fit_range": [lo_m, hi_m],
        "strictly_increasing": increasing,
        "slope_lower": slope - SE_MARGIN * slope_se,
        "ratio_200_20": float(mean_curve[199] / mean_curve[19]) if M >= 200 else None,
        "verdict": PASS if increasing and positive else FAIL,
        "seed": seed.to_json(),
    }
    return GrowthCurve(M_list, values, cis, "log", slope, slope_se, meta)


def _proxy_worker(payload, lo, hi):
    spec, base, radius, n = payload
    lat = spec.lattice
    origin = lat.origin
    c = lat.coords
    if lat.is_torus:
        k = lat.side_length
        c = (c + k // 2) % k - k // 2
    inside = np.sum(c.astype(float) ** 2, axis=1) <= radius * radius
    v0 = np.zeros(lat.n_vertices)
    v0[lat.vertex_id(origin)] = 1.0
    out = []
    for i in range(lo, hi):
        traj = reverse_environment(sample_environment(spec, base.derive(i)))
        rows, _ = propagate(traj, v0, 0.0, np.arange(1, n + 1, dtype=float))
        out.append(float(rows[:, inside].sum(axis=1).min()))
    return out


def diffusive_mass_proxy(spec: EnvironmentSpec, K: float, n: int, env_replicas: int, seed=0, threads: int = 1) -> dict:
    """Per environment, ``min_{1<=m<=n} P_{0,-m}(origin, ball of radius K sqrt(n))``.

    A finite-sample proxy for the diffusive-confinement hypothesis; it is
    reported, not turned into a verdict.  Box lattices use their own
    coordinates; tori use the centred representatives.
    """
    if K <= 0 or n < 1 or env_replicas < 1:
        raise DomainError("need K > 0, n >= 1 and env_replicas >= 1")
    radius = K * math.sqrt(n)
    if spec.lattice.is_torus and 2 * radius >= spec.lattice.side_length:
        raise DomainError("ball of radius K sqrt(n) wraps around the torus")
    seed = as_seed(seed)
    spec = spec.with_window(-float(n), 0.0)
    mins = run_replicas(_proxy_worker, (spec, seed, radius, int(n)), env_replicas, threads)
    mean, se = _mean_se(mins)
    return _spec_meta(spec) | {
        "K": K,
        "n": n,
        "radius": radius,
        "per_environment_min": mins,
        "mean": mean,
        "se": se,
        "seed": seed.to_json(),
    }


def growth_report(curve: GrowthCurve, name: str = "collision_growth") -> TestReport:
    """Pass when mean counts increase over the horizons and every collision identity held."""
    meta = curve.metadata
    vals = [v for v in curve.values if math.isfinite(v)]
    increasing = len(vals) == len(curve.values) and all(b > a for a, b in zip(vals[:-1], vals[1:]))
    err = float(meta.get("identity_max_rel_error", 0.0))
    if len(vals) < len(curve.values):
        verdict = INCONCLUSIVE
    else:
        verdict = PASS if increasing and err <= COLLISION_IDENTITY_RTOL else FAIL
    ratio = vals[-1] / vals[0] if len(vals) >= 2 and vals[0] > 0 else math.nan
    return TestReport(
        name,
        ratio,
        1.0,
        0.0,
        int(meta.get("replicas", 0)),
        verdict,
        "increasing",
        {"curve": curve.to_json(), "identity_max_rel_error": err},
    )


def divergence_report(curve: GrowthCurve, name: str = "backward_sum_divergence") -> TestReport:
    meta = curve.metadata
    return TestReport(
        name,
        curve.fitted_slope,
        0.0,
        curve.slope_se,
        int(meta["env_replicas"]),
        meta["verdict"],
        "positive_slope",
        {"curve": curve.to_json()},
    )
