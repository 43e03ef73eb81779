import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from dyn_rcm_lab.environment import (
    ConductanceTrajectory,
    DeterministicPhase,
    DynamicalPercolation,
    EnvironmentSpec,
    Exclusion,
    Static,
    TimeWindow,
    constant_trajectory,
    infinitesimal_norm,
    kind_from_json,
    kind_to_json,
    reverse_environment,
    sample_environment,
    sample_exclusion,
    shift_environment,
)
from dyn_rcm_lab.errors import DomainError
from dyn_rcm_lab.lattice import Lattice
from dyn_rcm_lab.seeding import RandomSeed

Z2 = Lattice.torus(2, 6)
WIN = TimeWindow(-2.0, 3.0)


def spec(kind, lattice=Z2, window=WIN):
    return EnvironmentSpec(kind, lattice, window)


KINDS = [Static(1.5), DynamicalPercolation(0.4, 2.0), Exclusion(0.3, 1.0, 0.2, 1.0), DeterministicPhase(2.0)]


def test_window_must_be_ordered():
    with pytest.raises(DomainError):
        TimeWindow(1.0, 1.0)


@pytest.mark.parametrize(
    "kind",
    [Static(-1), DynamicalPercolation(1.5, 1), DynamicalPercolation(0.5, 0), Exclusion(2, 1), Exclusion(0.5, 1, 2, 1), DeterministicPhase(-1)],
)
def test_invalid_parameters(kind):
    with pytest.raises(DomainError):
        spec(kind)


def test_static_is_one_piece():
    traj = sample_environment(spec(Static(1.0)), 0)
    assert all(len(b) == 1 for b in traj.breakpoints)
    assert all(v.tolist() == [1.0] for v in traj.values)


def test_dp_refresh_count_is_poisson():
    lat = Lattice.torus(2, 71)  # 10082 edges
    traj = sample_environment(EnvironmentSpec(DynamicalPercolation(0.5, 1.0), lat, TimeWindow(0, 10)), 3)
    counts = np.array([len(b) - 1 for b in traj.breakpoints])
    assert len(counts) >= 10**4
    se = math.sqrt(10 / len(counts))
    assert abs(counts.mean() - 10) < 3 * se


def test_dp_open_fraction():
    lat = Lattice.torus(2, 71)
    traj = sample_environment(EnvironmentSpec(DynamicalPercolation(0.3, 1.0), lat, TimeWindow(0, 10)), 4)
    frac = []
    for b, v in zip(traj.breakpoints, traj.values):
        ends = np.append(b[1:], 10.0)
        frac.append(float(np.sum(v * (ends - b))) / 10.0)
    frac = np.array(frac)
    assert abs(frac.mean() - 0.3) < 3 * frac.std(ddof=1) / math.sqrt(len(frac))


def test_dp_fixed_time_marginal_chi_square():
    lat = Lattice.torus(2, 71)
    traj = sample_environment(EnvironmentSpec(DynamicalPercolation(0.3, 1.0), lat, TimeWindow(0, 10)), 5)
    for t in (0.0, 4.2, 9.9):
        open_ = int(traj.values_at(t).sum())
        n = lat.n_edges
        res = stats.chisquare([open_, n - open_], [0.3 * n, 0.7 * n])
        assert res.pvalue > 1e-3


def test_exclusion_conserves_particles_and_convention():
    lat = Lattice.torus(2, 8)
    s = EnvironmentSpec(Exclusion(0.4, 2.0, 0.1, 1.0), lat, TimeWindow(0, 5))
    traj, driver = sample_exclusion(s, RandomSeed(6).rng())
    occ = driver["initial"].copy()
    n0 = occ.sum()
    for t, a, b in driver["swaps"]:
        assert occ[a] != occ[b]
        occ[a], occ[b] = occ[b], occ[a]
        assert occ.sum() == n0
    # conductances at the end agree with the final occupancy
    ends = lat.edge_array
    want = np.where(occ[ends[:, 0]] | occ[ends[:, 1]], 1.0, 0.1)
    assert np.array_equal(traj.values_at(5.0), want)


def test_deterministic_phase_shared_and_recorded():
    traj = sample_environment(spec(DeterministicPhase(2.0, 0.05)), 7)
    assert traj.meta["discretization_step"] == 0.05
    assert all(np.array_equal(traj.values[0], v) for v in traj.values)
    assert traj.values[0].min() >= 0 and traj.values[0].max() <= 2.0


def test_reverse_single_edge_example():
    lat = Lattice.torus(1, 2)
    traj = ConductanceTrajectory(lat, TimeWindow(0, 2), [np.array([0.0, 1.0])], [np.array([1.0, 2.0])])
    rev = reverse_environment(traj)
    assert rev.window == TimeWindow(-2, 0)
    assert rev.breakpoints[0].tolist() == [-2.0, -1.0]
    assert rev.values[0].tolist() == [2.0, 1.0]


def test_reverse_static():
    traj = constant_trajectory(Z2, WIN, 2.0)
    rev = reverse_environment(traj)
    assert rev.window == TimeWindow(-3.0, 2.0)
    assert all(v.tolist() == [2.0] for v in rev.values)


@given(st.sampled_from(KINDS), st.integers(0, 2**32))
def test_reverse_is_an_involution(kind, seed):
    traj = sample_environment(spec(kind), seed)
    assert reverse_environment(reverse_environment(traj)).equals(traj)


@given(st.sampled_from(KINDS), st.integers(0, 2**32), st.floats(-1.9, 2.9))
def test_reverse_values(kind, seed, t):
    traj = sample_environment(spec(kind), seed)
    rev = reverse_environment(traj)
    cuts = set(traj.change_times().tolist())
    if t in cuts or -t in cuts:
        return  # a.e. statement
    assert np.array_equal(rev.values_at(-t), traj.values_at(t))


def test_identity_and_inverse_shifts():
    traj = sample_environment(spec(DynamicalPercolation(0.5, 1.0)), 8)
    assert shift_environment(traj, (0, 0), 0.0).equals(traj)
    back = shift_environment(shift_environment(traj, (0, 0), 0.75), (0, 0), -0.75)
    assert back.window == traj.window
    for b0, b1 in zip(traj.breakpoints, back.breakpoints):
        assert np.allclose(b0, b1, rtol=0, atol=1e-15)


def test_spatial_shift_matches_brute_force_relabeling():
    traj = sample_environment(spec(DynamicalPercolation(0.5, 1.0)), 9)
    x = (2, 5)
    out = shift_environment(traj, x, 0.0)
    lat = traj.lattice
    for eid, (a, b) in enumerate(lat.edges):
        # output at e reads input at e - x
        src = lat.edge_id((lat.translate(a, (-2, -5)), lat.translate(b, (-2, -5))))
        assert np.array_equal(out.breakpoints[eid], traj.breakpoints[src])
        assert np.array_equal(out.values[eid], traj.values[src])


@given(st.integers(0, 2**32), st.tuples(st.integers(0, 5), st.integers(0, 5)), st.floats(-1.5, 2.5))
def test_shift_value_definition(seed, x, s):
    traj = sample_environment(spec(DynamicalPercolation(0.5, 1.0)), seed)
    t = 0.5
    out = shift_environment(traj, x, t)
    lat = traj.lattice
    if not out.window.contains(s) or not traj.window.contains(s - t):
        return
    for eid, (a, b) in enumerate(lat.edges):
        neg = tuple(-c for c in x)
        src = lat.edge_id((lat.translate(a, neg), lat.translate(b, neg)))
        assert out.value(eid, s) == traj.value(src, s - t)


@given(st.integers(0, 2**32), st.integers(0, 5), st.integers(0, 5), st.integers(0, 5), st.integers(0, 5))
def test_shift_composition(seed, a, b, c, d):
    traj = sample_environment(spec(DynamicalPercolation(0.5, 1.0)), seed)
    two = shift_environment(shift_environment(traj, (c, d), 0.0), (a, b), 0.0)
    one = shift_environment(traj, (a + c, b + d), 0.0)
    assert two.equals(one)
    # time parts compose exactly for dyadic shifts
    tt = shift_environment(shift_environment(traj, (0, 0), 0.25), (0, 0), 0.5)
    assert tt.equals(shift_environment(traj, (0, 0), 0.75))


@given(st.integers(0, 2**32))
def test_reversal_conjugates_time_shift(seed):
    traj = sample_environment(spec(DynamicalPercolation(0.5, 1.0)), seed)
    lhs = reverse_environment(shift_environment(traj, (0, 0), 0.5))
    rhs = shift_environment(reverse_environment(traj), (0, 0), -0.5)
    assert lhs.equals(rhs)


def test_spatial_shift_on_box_rejected():
    traj = sample_environment(spec(Static(1.0), Lattice.box(2, 3)), 0)
    with pytest.raises(DomainError):
        shift_environment(traj, (1, 0), 0.0)
    assert shift_environment(traj, (0, 0), 1.0).window == TimeWindow(-1.0, 4.0)


def test_json_round_trip():
    traj = sample_environment(spec(DynamicalPercolation(0.5, 1.0)), 10)
    d = traj.to_json()
    assert set(d) >= {"lattice", "window", "edges"}
    assert set(d["edges"][0]) == {"edge_id", "breakpoints", "values"}
    assert ConductanceTrajectory.from_json(d).equals(traj)
    for k in KINDS:
        assert kind_from_json(kind_to_json(k)) == k


@pytest.mark.parametrize(
    "kind,p,want",
    [
        (Static(1.0), 1, 4.0),
        (DynamicalPercolation(0.5, 3.0), 1, 2.0),
        (DynamicalPercolation(0.5, 1.0), 2, math.sqrt(5.0)),
    ],
)
def test_analytic_norms(kind, p, want):
    norm = infinitesimal_norm(EnvironmentSpec(kind, Lattice.torus(2, 8), WIN), p)
    assert norm.method == "analytic" and norm.ci_halfwidth == 0
    assert norm.value == pytest.approx(want, rel=1e-12)


@pytest.mark.parametrize("kind", KINDS)
def test_norms_increase_in_p(kind):
    vals = [infinitesimal_norm(spec(kind), p).value for p in (1, 2, 3, 4)]
    assert all(b >= a - 1e-12 for a, b in zip(vals, vals[1:]))


def test_norm_rejects_p_below_one():
    with pytest.raises(DomainError):
        infinitesimal_norm(spec(Static(1.0)), 0)


@pytest.mark.parametrize("kind", [DynamicalPercolation(0.5, 1.0), Exclusion(0.5, 1.0, 0.0, 1.0), DeterministicPhase(1.0)])
def test_monte_carlo_norm_agrees_with_analytic(kind):
    s = spec(kind, Lattice.torus(2, 8))
    exact = infinitesimal_norm(s, 2).value
    mc = infinitesimal_norm(s, 2, "monte-carlo", replicas=3000, seed=11)
    assert mc.details["eps"] == 2.0**-10 and "value_at_half_eps" in mc.details
    assert abs(mc.value - exact) <= mc.ci_halfwidth + 0.02 * exact


def test_monte_carlo_norm_flags_wide_ci():
    mc = infinitesimal_norm(spec(DynamicalPercolation(0.5, 1.0)), 1, "monte-carlo", replicas=50, seed=1, tol=1e-6)
    assert mc.flagged
