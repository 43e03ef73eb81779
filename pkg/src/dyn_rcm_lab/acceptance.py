"""The ten acceptance criteria as seeded, report-producing functions.

Each ``criterion_n(seed, threads)`` returns a :class:`Criterion` holding its
TestReports, an overall verdict and the wall time.  Reports carry no timing
so that reruns can be compared byte for byte; wall times live on the
Criterion only.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .environment import (
    ConductanceTrajectory,
    DynamicalPercolation,
    EnvironmentSpec,
    Static,
    TimeWindow,
    sample_environment,
)
from .kernel import transition_kernel
from .lattice import Lattice
from .seeding import RandomSeed, as_seed
from .verify import (
    FAIL,
    PASS,
    TestReport,
    _jump_counts,
    backward_sum_divergence,
    bound_verdict,
    check_censored_stationarity,
    check_markov_type,
    check_moment_bound,
    collision_growth,
    divergence_report,
    identity_verdict,
)
from .voter import CONSENSUS_HORIZON_8X8, consensus_fraction, duality_check, half_half_field
from .walker import (
    COLLISION_IDENTITY_RTOL,
    build_path,
    reverse_path,
    reverse_point_process,
    sample_point_process,
    shift_path,
    shift_point_process,
)

ACCEPTANCE_SEED = 20240611
DP = DynamicalPercolation(0.5, 1.0)

# runtime budgets in seconds (None: no budget)
BUDGETS = {1: 10.0, 2: 30.0, 3: 120.0, 4: 300.0, 5: None, 6: 600.0, 7: None, 8: None, 9: None, 10: None}


@dataclass
class Criterion:
    number: int
    title: str
    reports: list
    passed: bool
    summary: str
    seconds: float = 0.0
    extra: dict = field(default_factory=dict)

    def line(self) -> str:
        budget = BUDGETS.get(self.number)
        timing = f"{self.seconds:.1f}s" + (f" (budget {budget:.0f}s)" if budget else "")
        return f"CRITERION {self.number}: {'PASS' if self.passed else 'FAIL'}  {self.title}: {self.summary}  [{timing}]"

    @property
    def within_budget(self) -> bool:
        budget = BUDGETS.get(self.number)
        return budget is None or self.seconds <= budget


def random_piecewise_trajectory(lattice: Lattice, rng: np.random.Generator, window=TimeWindow(0.0, 2.0), max_pieces=16):
    """Common breakpoints for all edges, 1..max_pieces pieces, values in [0, 2) with some closed edges."""
    n = int(rng.integers(1, max_pieces + 1))
    cuts = np.sort(rng.uniform(window.start, window.end, n - 1))
    b = np.concatenate([[window.start], cuts])
    vals = rng.uniform(0.0, 2.0, (lattice.n_edges, n)) * (rng.random((lattice.n_edges, n)) < 0.8)
    return ConductanceTrajectory(lattice, window, [b] * lattice.n_edges, list(vals), {"pieces": n})


# -- 1 ----------------------------------------------------------------------------


def criterion_1(seed, threads=1) -> Criterion:
    tol = 1e-12
    worst, pieces = 0.0, []
    for j, side in enumerate((4, 5)):
        lat = Lattice.torus(2, side)
        for i in range(20):
            rng = seed.derive(j).derive(i).rng()
            traj = random_piecewise_trajectory(lat, rng)
            s, t = sorted(rng.uniform(0.0, 2.0, 2))
            D = transition_kernel(traj, s, t, tol).entries - transition_kernel(traj, t, s, tol).entries.T
            worst = max(worst, float(np.abs(D).max()))
            pieces.append(traj.meta["pieces"])
    rep = TestReport(
        "c1_detailed_balance", worst, 1e-9, 0.0, 40, PASS if worst <= 1e-9 else FAIL, "bound",
        {"tol": tol, "tori": [4, 5], "pieces": pieces},
    )
    return Criterion(1, "detailed balance", [rep], rep.verdict == PASS, f"max |P_st - P_ts^T| = {worst:.2e} <= 1e-9")


# -- 2 ----------------------------------------------------------------------------

_LAT2 = Lattice.torus(2, 5)
_SPEC2 = EnvironmentSpec(DP, _LAT2, TimeWindow(-3.0, 3.0))


def _case(s: RandomSeed):
    traj = sample_environment(_SPEC2, s.derive(0))
    U = sample_point_process(traj, s.derive(1))
    rng = s.derive(2).rng()
    u = _LAT2.vertex(int(rng.integers(_LAT2.n_vertices)))
    return U, u, float(rng.uniform(-3.0, 3.0)), rng


def _bijection(s):
    U, u, s0, rng = _case(s)
    p = build_path(U, (u, s0))
    t = float(rng.uniform(-3.0, 3.0))
    q = build_path(U, (p.position(t), t))
    return q.position(s0) == u and q.same_function(p)


def _shift(s):
    U, u, s0, rng = _case(s)
    x = tuple(int(c) for c in rng.integers(0, 5, 2))
    t = float(rng.uniform(-1.0, 1.0))
    lhs = shift_path(build_path(U, (u, s0)), x, t)
    rhs = build_path(shift_point_process(U, x, t), (_LAT2.translate(u, tuple(-c for c in x)), s0 - t))
    return lhs.same_function(rhs)


def _reversal(s):
    U, u, s0, _ = _case(s)
    lhs = reverse_path(build_path(U, (u, s0)))
    rhs = build_path(reverse_point_process(U), (u, -s0))
    return np.array_equal(lhs.times, rhs.times) and np.array_equal(lhs.vertices, rhs.vertices)


def criterion_2(seed, threads=1, cases=1000) -> Criterion:
    reports = []
    for k, (name, fn) in enumerate((("bijection", _bijection), ("shift_equivariance", _shift), ("reversal_equivariance", _reversal))):
        base = seed.derive(k)
        bad = sum(not fn(base.derive(i)) for i in range(cases))
        reports.append(TestReport(f"c2_{name}", float(bad), 0.0, 0.0, cases, PASS if bad == 0 else FAIL, "exact", {}))
    ok = all(r.verdict == PASS for r in reports)
    return Criterion(2, "bijection and equivariance", reports, ok, f"mismatches {[int(r.empirical_value) for r in reports]} over {cases} cases each")


# -- 3 ----------------------------------------------------------------------------


def criterion_3(seed, threads=1, replicas=100_000) -> Criterion:
    box = Lattice.box(2, 12)
    reports = []
    for j, (label, kind) in enumerate((("static", Static(1.0)), ("dp", DP))):
        spec = EnvironmentSpec(kind, box, TimeWindow(0.0, 1.0))
        pair = [check_moment_bound(spec, p, 1.0, replicas, seed.derive(j), threads) for p in (1, 2)]
        for r in pair:
            r.name = f"c3_{r.name}_{label}"
        reports += pair
        if label == "static":
            # homogeneous rate: N is Poisson(4), so the first two moments are known exactly
            for r, target in zip(pair, (4.0, 20.0)):
                v = identity_verdict(r.empirical_value, target, r.standard_error)
                reports.append(
                    TestReport(r.name.replace("bound", "exact"), r.empirical_value, target, r.standard_error, replicas, v, "identity", {})
                )
    # the second run must recompute, not reuse the cached sample
    _jump_counts.cache_clear()
    exploded = sum(r.metadata.get("exploded", 0) for r in reports)
    ok = all(r.verdict == PASS for r in reports) and exploded == 0
    summ = ", ".join(f"{r.name[3:]}={r.empirical_value:.3f} vs {r.bound_or_target:g}" for r in reports)
    return Criterion(3, "jump-count moments", reports, ok, summ)


# -- 4 ----------------------------------------------------------------------------


def criterion_4(seed, threads=1, replicas=10_000) -> Criterion:
    spec = EnvironmentSpec(DP, Lattice.box(2, 100), TimeWindow(0.0, 1.0))
    reports = []
    for j, t in enumerate((1.0, 10.0)):
        r = check_markov_type(spec, t, replicas, seed.derive(j), threads=threads)
        r.name = "c4_" + r.name
        reports.append(r)
    ok = all(r.verdict == PASS and r.metadata["exploded"] == 0 for r in reports)
    summ = ", ".join(f"t={r.metadata['t']:g}: {r.empirical_value:.2f} + 3SE <= {r.bound_or_target:g}" for r in reports)
    return Criterion(4, "maximal displacement", reports, ok, summ)


# -- 5 ----------------------------------------------------------------------------


def criterion_5(seed, threads=1, replicas=10_000) -> Criterion:
    reports = []
    ok = True
    for j, (label, kind) in enumerate((("static", Static(1.0)), ("dp", DP))):
        spec = EnvironmentSpec(kind, Lattice.box(2, 6), TimeWindow(0.0, 1.0))
        r = check_censored_stationarity(spec, 6, [1.0, 5.0], replicas, seed.derive(j), "uniform", threads)
        c = check_censored_stationarity(spec, 6, [0.1], replicas, seed.derive(j).derive(1), "origin", threads)
        r.name, c.name = f"c5_{label}_uniform", f"c5_{label}_fixed_start_control"
        reports += [r, c]
        ok = ok and r.verdict == PASS and c.verdict == FAIL
    summ = ", ".join(f"{r.name} min p={r.empirical_value:.3g}" for r in reports)
    return Criterion(5, "censored stationarity (controls must fail)", reports, ok, summ)


# -- 6 ----------------------------------------------------------------------------


def criterion_6(seed, threads=1, env_replicas=50, pair_replicas=40) -> Criterion:
    lat = Lattice.torus(2, 32)
    reports, ok, parts, ident = [], True, [], []
    for j, (label, kind) in enumerate((("static", Static(1.0)), ("dp", DP))):
        spec = EnvironmentSpec(kind, lat, TimeWindow(0.0, 1.0))
        curve = backward_sum_divergence(spec, [10, 20, 50, 100, 200], env_replicas, seed.derive(j), (10, 200), threads)
        r = divergence_report(curve, f"c6_backward_sum_{label}")
        ratio = curve.metadata["ratio_200_20"]
        good = r.verdict == PASS and ratio >= 1.3
        r.verdict = PASS if good else FAIL
        r.metadata["ratio_200_20"] = ratio
        reports.append(r)
        ok = ok and good
        parts.append(f"{label}: S200/S20={ratio:.3f}, slope={curve.fitted_slope:.4f} (lower {curve.metadata['slope_lower']:.4f})")
        # Monte Carlo pairs on the same torus, used by criterion 8
        pairs = collision_growth(spec, [(0, 0), (0, 0)], [20.0, 200.0], pair_replicas, seed.derive(10 + j), threads)
        ident.append(pairs.metadata["identity_max_rel_error"])
    extra = {"identity_errors": ident, "pairs": 2 * pair_replicas}
    return Criterion(6, "backward collision sums diverge", reports, ok, "; ".join(parts), extra=extra)


# -- 7 ----------------------------------------------------------------------------


def criterion_7(seed, threads=1, replicas=1000) -> Criterion:
    spec = EnvironmentSpec(Static(1.0), Lattice.torus(1, 256), TimeWindow(0.0, 1.0))
    curve = collision_growth(spec, [(0,), (0,)], [250.0, 1000.0], replicas, seed, threads)
    ratio = curve.values[1] / curve.values[0]
    ok = 1.4 <= ratio <= 2.6
    rep = TestReport(
        "c7_collision_ratio", ratio, 2.0, 0.0, replicas, PASS if ok else FAIL, "interval",
        {"interval": [1.4, 2.6], "curve": curve.to_json()},
    )
    extra = {"identity_errors": [curve.metadata["identity_max_rel_error"]], "pairs": replicas}
    return Criterion(7, "1D collision growth", [rep], ok, f"count(1000)/count(250) = {ratio:.3f} in [1.4, 2.6]", extra=extra)


# -- 8 ----------------------------------------------------------------------------


def criterion_8(c6: Criterion, c7: Criterion) -> Criterion:
    errs = c6.extra["identity_errors"] + c7.extra["identity_errors"]
    pairs = c6.extra["pairs"] + c7.extra["pairs"]
    worst = max(errs)
    rep = TestReport(
        "c8_collision_identity", worst, COLLISION_IDENTITY_RTOL, 0.0, pairs,
        bound_verdict(worst, COLLISION_IDENTITY_RTOL, 0.0), "bound", {"per_run": errs},
    )
    return Criterion(8, "collision measure identity", [rep], rep.verdict == PASS, f"max rel error {worst:.2e} over {pairs} pairs")


# -- 9 ----------------------------------------------------------------------------


def criterion_9(seed, threads=1, replicas=10_000, consensus_replicas=1000) -> Criterion:
    lat = Lattice.torus(2, 4)
    spec = EnvironmentSpec(Static(1.0), lat, TimeWindow(0.0, 1.0))
    d = duality_check(spec, half_half_field(lat), (0, 0), 1.0, replicas, seed.derive(0), threads)
    d.name = "c9_voter_duality"
    cspec = EnvironmentSpec(Static(1.0), Lattice.torus(2, 8), TimeWindow(0.0, 1.0))
    c = consensus_fraction(cspec, CONSENSUS_HORIZON_8X8, consensus_replicas, seed.derive(1), threads=threads)
    c.name = "c9_consensus_fraction"
    ok = d.verdict == PASS and c.verdict == PASS
    lab = d.metadata["per_label"][0]
    summ = (
        f"freq {lab['frequency']:.4f} vs kernel {lab['prediction']:.4f} (SE {lab['se']:.4f}); "
        f"consensus {c.empirical_value:.3f} by t={CONSENSUS_HORIZON_8X8:g}"
    )
    return Criterion(9, "voter duality and consensus", [d, c], ok, summ)


# -- driver ---------------------------------------------------------------------------


def run_criteria(master=ACCEPTANCE_SEED, threads=1, only=None, log=None) -> dict[int, Criterion]:
    """Criteria 1-9 (8 reuses the pairs of 6 and 7)."""
    master = as_seed(master)
    funcs = {1: criterion_1, 2: criterion_2, 3: criterion_3, 4: criterion_4, 5: criterion_5, 6: criterion_6, 7: criterion_7, 9: criterion_9}
    wanted = set(only or range(1, 10))
    if 8 in wanted:
        wanted |= {6, 7}
    out = {}
    for n in sorted(wanted):
        if n == 8:
            continue
        t0 = time.perf_counter()
        crit = funcs[n](master.derive(n), threads)
        crit.seconds = time.perf_counter() - t0
        out[n] = crit
        if log:
            log(crit.line())
        if n == 7 and 8 in wanted:
            out[8] = criterion_8(out[6], out[7])
            if log:
                log(out[8].line())
    return dict(sorted(out.items()))


def report_bytes(criteria: dict) -> dict[str, bytes]:
    return {r.name: (r.dumps() + "\n").encode() for c in criteria.values() for r in c.reports}


def write_reports(criteria: dict, out_dir) -> dict[str, bytes]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    blobs = report_bytes(criteria)
    for name, blob in blobs.items():
        (out / f"report_{name}.json").write_bytes(blob)
    summary = {n: {"passed": c.passed, "seconds": c.seconds, "summary": c.summary} for n, c in criteria.items()}
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return blobs


def criterion_10(first: dict, second: dict) -> Criterion:
    a, b = report_bytes(first), report_bytes(second)
    differing = sorted(k for k in set(a) | set(b) if a.get(k) != b.get(k))
    ok = not differing and len(a) > 0
    rep = TestReport("c10_determinism", float(len(differing)), 0.0, 0.0, len(a), PASS if ok else FAIL, "exact", {"differing": differing})
    return Criterion(10, "determinism", [rep], ok, f"{len(a)} report files, {len(differing)} differ")


__all__ = ["ACCEPTANCE_SEED", "Criterion", "run_criteria", "criterion_8", "criterion_10", "write_reports", "report_bytes"]
