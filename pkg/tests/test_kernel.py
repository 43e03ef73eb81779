import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dyn_rcm_lab.environment import (
    ConductanceTrajectory,
    DynamicalPercolation,
    EnvironmentSpec,
    EnvNorm,
    Static,
    TimeWindow,
    constant_trajectory,
    sample_environment,
)
from dyn_rcm_lab.errors import DomainError
from dyn_rcm_lab.kernel import (
    StirlingTable,
    backward_collision_sum,
    cauchy_schwarz_bound,
    generator_at,
    kernel_column,
    kernel_row,
    mass_transport_check,
    mass_transport_sides,
    moment_bound,
    propagate,
    stirling2,
    transition_kernel,
)
from dyn_rcm_lab.lattice import Ball, Lattice, ball_members
from dyn_rcm_lab.seeding import RandomSeed
from dyn_rcm_lab.walker import LazyPointProcess, build_path

from oracles import expm_kernel, generator, set_partitions, two_state_offdiag

T4 = Lattice.torus(2, 4)


def piecewise_traj(lattice, seed, window=TimeWindow(0.0, 2.0), max_pieces=16):
    """Common-breakpoint environment with random values on each piece."""
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, max_pieces + 1))
    cuts = np.sort(rng.uniform(window.start, window.end, n - 1))
    b = np.concatenate([[window.start], cuts])
    vals = rng.uniform(0, 2, (lattice.n_edges, n)) * (rng.random((lattice.n_edges, n)) < 0.8)
    return ConductanceTrajectory(lattice, window, [b] * lattice.n_edges, list(vals))


def dp_traj(seed, lattice=T4, window=TimeWindow(0.0, 2.0)):
    return sample_environment(EnvironmentSpec(DynamicalPercolation(0.5, 1.0), lattice, window), seed)


# -- generator ---------------------------------------------------------------


def test_generator_zero_environment():
    G = generator_at(constant_trajectory(T4, TimeWindow(0, 1), 0.0), 0.5)
    assert not G.entries.any()


def test_generator_two_vertex():
    lat = Lattice.torus(1, 2)
    G = generator_at(constant_trajectory(lat, TimeWindow(0, 1), 0.7), 0.0).entries
    assert np.array_equal(G, np.array([[-0.7, 0.7], [0.7, -0.7]]))


def test_generator_torus_diagonal():
    G = generator_at(constant_trajectory(Lattice.torus(2, 3), TimeWindow(0, 1), 1.0), 0.0).entries
    assert np.all(np.diag(G) == -4)


def test_generator_outside_window():
    with pytest.raises(DomainError):
        generator_at(constant_trajectory(T4, TimeWindow(0, 1), 1.0), 2.0)


@given(st.integers(0, 2**32), st.floats(0, 2))
def test_generator_invariants(seed, t):
    traj = piecewise_traj(T4, seed)
    G = generator_at(traj, t).entries
    assert np.array_equal(G, G.T)
    assert np.allclose(G.sum(axis=1), 0, atol=1e-13)
    off = G - np.diag(np.diag(G))
    assert off.min() >= 0
    assert np.allclose(G, generator(T4, traj.values_at(t)))


# -- dense kernels -----------------------------------------------------------


def test_identity_when_times_equal():
    P = transition_kernel(dp_traj(1), 0.7, 0.7)
    assert np.array_equal(P.entries, np.eye(16))


def test_tol_and_window_errors():
    traj = dp_traj(1)
    with pytest.raises(DomainError):
        transition_kernel(traj, 0.0, 1.0, tol=0.0)
    with pytest.raises(DomainError):
        transition_kernel(traj, 0.0, 3.0)


@pytest.mark.parametrize("c,t", [(1.0, 0.3), (0.5, 2.0), (3.0, 4.0), (2.0, 40.0)])
def test_two_state_closed_form(c, t):
    lat = Lattice.torus(1, 2)
    P = transition_kernel(constant_trajectory(lat, TimeWindow(0, t), c), 0.0, t).entries
    assert abs(P[0, 1] - two_state_offdiag(c, t)) < 1e-12
    assert abs(P[0, 0] - (1 - two_state_offdiag(c, t))) < 1e-12


@given(st.integers(0, 2**32))
def test_kernel_matches_expm_oracle(seed):
    traj = piecewise_traj(T4, seed)
    for s, t in [(0.0, 2.0), (1.7, 0.2)]:
        P = transition_kernel(traj, s, t).entries
        assert np.abs(P - expm_kernel(traj, s, t)).max() < 1e-10


@given(st.integers(0, 2**32))
def test_row_stochastic_and_nonnegative(seed):
    P = transition_kernel(piecewise_traj(T4, seed), 0.0, 2.0).entries
    assert P.min() >= 0
    assert np.abs(P.sum(axis=1) - 1).max() <= 1e-12


@given(st.integers(0, 2**32))
def test_detailed_balance(seed):
    traj = piecewise_traj(T4, seed)
    tol = 1e-12
    D = transition_kernel(traj, 0.1, 1.9, tol).entries - transition_kernel(traj, 1.9, 0.1, tol).entries.T
    assert np.abs(D).max() <= 10 * tol


def test_detailed_balance_dp_eight_pieces():
    lat = T4
    traj = sample_environment(EnvironmentSpec(DynamicalPercolation(0.5, 1.0), lat, TimeWindow(0, 0.25)), 3)
    n_cuts = len({float(b) for bps in traj.breakpoints for b in bps[1:]})
    assert n_cuts >= 1
    D = transition_kernel(traj, 0, 0.25).entries - transition_kernel(traj, 0.25, 0).entries.T
    assert np.abs(D).max() <= 1e-9


@given(st.integers(0, 2**32), st.floats(0.05, 0.95))
def test_chapman_kolmogorov(seed, frac):
    traj = piecewise_traj(T4, seed)
    s, u = 0.0, 2.0
    t = s + frac * (u - s)
    lhs = transition_kernel(traj, s, u).entries
    rhs = transition_kernel(traj, s, t).entries @ transition_kernel(traj, t, u).entries
    assert np.abs(lhs - rhs).max() <= 1e-11


def test_halving_tolerance():
    traj = dp_traj(4)
    a = transition_kernel(traj, 0, 2, 1e-8)
    b = transition_kernel(traj, 0, 2, 5e-9)
    assert np.abs(a.entries - b.entries).max() < a.tolerance


def test_single_piece_kernel_is_symmetric():
    P = transition_kernel(constant_trajectory(T4, TimeWindow(0, 1), 1.3), 0, 1).entries
    assert np.abs(P - P.T).max() < 1e-13
    assert np.abs(P.sum(axis=0) - 1).max() < 1e-12


def test_multi_piece_kernel_is_not_symmetric():
    # a product of symmetric factors need not be symmetric; detailed balance is the true identity
    traj = dp_traj(2)
    P = transition_kernel(traj, 0, 2).entries
    assert np.abs(P - P.T).max() > 1e-3
    assert np.abs(P.sum(axis=0) - 1).max() < 1e-12


def test_kernel_matches_walker_frequencies():
    traj = dp_traj(6, window=TimeWindow(0.0, 1.0))
    P = transition_kernel(traj, 0.0, 1.0).entries[0]
    n = 100_000
    base = RandomSeed(6)
    counts = np.zeros(16)
    for i in range(n):
        U = LazyPointProcess(traj, base.derive(i).rng())
        counts[T4.vertex_id(build_path(U, ((0, 0), 0.0)).position(1.0))] += 1
    freq = counts / n
    se = np.sqrt(P * (1 - P) / n)
    assert np.all(np.abs(freq - P) <= 3 * se + 1e-12)


# -- row propagator ----------------------------------------------------------


@given(st.integers(0, 2**32))
def test_rows_and_columns_match_dense(seed):
    traj = piecewise_traj(T4, seed)
    u = T4.vertex(seed % 16)
    for s, t in [(0.3, 1.8), (1.8, 0.3)]:
        P = transition_kernel(traj, s, t).entries
        assert np.abs(kernel_row(traj, u, s, t) - P[seed % 16]).max() < 1e-11
        assert np.abs(kernel_column(traj, u, s, t) - P[:, seed % 16]).max() < 1e-11


def test_propagate_validation():
    traj = dp_traj(1)
    with pytest.raises(DomainError):
        propagate(traj, np.eye(16)[0], 0.5, [0.2])
    with pytest.raises(DomainError):
        propagate(traj, np.eye(16)[0], 0.5, [1.0, 0.8])
    with pytest.raises(DomainError):
        propagate(traj, np.eye(16)[0], 0.5, [3.0])


def test_propagate_long_static_horizon():
    # Poisson means far above the substep split threshold
    lat = Lattice.torus(1, 2)
    traj = constant_trajectory(lat, TimeWindow(0, 500), 5.0)
    rows, err = propagate(traj, np.array([1.0, 0.0]), 0.0, [0.01, 500.0])
    assert abs(rows[0, 1] - two_state_offdiag(5.0, 0.01)) < 1e-12
    # each substep's truncation counts towards the reported bound
    assert err > 1e-12
    assert abs(rows[1, 1] - 0.5) <= err


# -- backward collision sums -------------------------------------------------


def test_backward_sum_zero_environment():
    S = backward_collision_sum(constant_trajectory(T4, TimeWindow(-10, 0), 0.0), (0, 0), 10)
    assert np.allclose(S, np.arange(1, 11), atol=1e-12)


def test_backward_sum_window_and_M():
    traj = constant_trajectory(T4, TimeWindow(-5, 0), 1.0)
    with pytest.raises(DomainError):
        backward_collision_sum(traj, (0, 0), 6)
    with pytest.raises(DomainError):
        backward_collision_sum(traj, (0, 0), 0)


def test_backward_sum_matches_dense_route():
    traj = dp_traj(8, window=TimeWindow(-6.0, 0.0))
    S = backward_collision_sum(traj, (1, 2), 6)
    u = T4.vertex_id((1, 2))
    want = np.cumsum([np.sum(expm_kernel(traj, 0.0, -float(j))[u] ** 2) for j in range(1, 7)])
    assert np.abs(S - want).max() < 1e-10


@given(st.integers(0, 2**32))
def test_backward_sum_nondecreasing(seed):
    S = backward_collision_sum(dp_traj(seed, window=TimeWindow(-8.0, 1.0)), (0, 0), 8)
    assert np.all(np.diff(S) > 0)


def test_backward_sum_one_dimensional_sqrt_growth():
    lat = Lattice.torus(1, 64)
    S = backward_collision_sum(constant_trajectory(lat, TimeWindow(-200, 0), 1.0), (0,), 200)
    m = np.arange(10, 201)
    slope = np.polyfit(np.log(m), np.log(S[m - 1]), 1)[0]
    assert 0.4 <= slope <= 0.6


def test_backward_sum_two_dimensional_log_growth():
    lat = Lattice.torus(2, 32)
    S = backward_collision_sum(constant_trajectory(lat, TimeWindow(-200, 0), 1.0), (0, 0), 200)
    assert S[199] / S[19] > 1.3
    m = np.arange(10, 201)
    assert np.polyfit(np.log(m), S[m - 1], 1)[0] > 0


# -- Cauchy-Schwarz ----------------------------------------------------------


def test_cauchy_schwarz_point_mass():
    lat = Lattice.torus(2, 8)
    ball = Ball((0, 0), 1)
    assert len(ball_members(lat, ball)) == 5
    row = np.zeros(lat.n_vertices)
    row[lat.vertex_id((0, 0))] = 1.0
    assert cauchy_schwarz_bound(row, ball, lat) == pytest.approx(1 / 5)


def test_cauchy_schwarz_equality_for_uniform_row():
    lat = Lattice.torus(2, 8)
    ball = Ball((2, 2), 2)
    ids = [lat.vertex_id(v) for v in ball_members(lat, ball)]
    row = np.zeros(lat.n_vertices)
    row[ids] = 1.0 / len(ids)
    assert cauchy_schwarz_bound(row, ball, lat) == pytest.approx(np.sum(row**2), rel=1e-14)


def test_cauchy_schwarz_rejects_excess_mass():
    lat = Lattice.torus(2, 8)
    with pytest.raises(DomainError):
        cauchy_schwarz_bound(np.full(lat.n_vertices, 1.0), Ball((0, 0), 1), lat)


@given(st.integers(0, 2**32), st.integers(0, 3))
def test_cauchy_schwarz_random_rows(seed, r):
    lat = Lattice.torus(2, 8)
    rng = np.random.default_rng(seed)
    row = rng.dirichlet(np.full(lat.n_vertices, 0.3)) * rng.uniform(0.5, 1)
    ball = Ball(lat.vertex(int(rng.integers(lat.n_vertices))), r)
    ids = [lat.vertex_id(v) for v in ball_members(lat, ball)]
    assert cauchy_schwarz_bound(row, ball, lat) <= np.sum(row[ids] ** 2) * (1 + 1e-12)


def test_cauchy_schwarz_thousand_cases():
    lat = Lattice.torus(2, 8)
    rng = np.random.default_rng(0)
    for _ in range(1000):
        row = rng.dirichlet(np.ones(lat.n_vertices))
        ball = Ball(lat.vertex(int(rng.integers(lat.n_vertices))), int(rng.integers(0, 4)))
        ids = [lat.vertex_id(v) for v in ball_members(lat, ball)]
        assert cauchy_schwarz_bound(row, ball, lat) <= np.sum(row[ids] ** 2) * (1 + 1e-12)


# -- mass transport ----------------------------------------------------------


def test_mass_transport_static_exact():
    spec = EnvironmentSpec(Static(1.0), T4, TimeWindow(0, 3))
    res = mass_transport_check(spec, 3, 5, seed=1)
    assert res.lhs == pytest.approx(res.rhs, abs=1e-13)
    assert res.diff_se < 1e-13 and res.agrees


def test_mass_transport_translation_invariant_single_environment():
    # every edge shares the same piecewise path, so the field is invariant under translations
    b = np.array([0.0, 0.4, 1.1])
    v = np.array([1.0, 0.2, 2.5])
    traj = ConductanceTrajectory(T4, TimeWindow(0, 2), [b] * T4.n_edges, [v] * T4.n_edges)
    lhs, rhs = mass_transport_sides(traj, (0, 0), 2.0)
    assert lhs == pytest.approx(rhs, abs=1e-13)


def test_mass_transport_dp_agrees():
    spec = EnvironmentSpec(DynamicalPercolation(0.5, 1.0), Lattice.torus(2, 8), TimeWindow(0, 2))
    res = mass_transport_check(spec, 2, 1000, seed=2)
    assert res.agrees
    assert res.to_json()["replicas"] == 1000


def test_mass_transport_requires_torus():
    with pytest.raises(DomainError):
        mass_transport_check(EnvironmentSpec(Static(1.0), Lattice.box(2, 3), TimeWindow(0, 1)), 1, 2)


# -- Stirling numbers and the moment bound -------------------------------------


@pytest.mark.parametrize("p,l", [(p, l) for p in range(1, 8) for l in range(1, p + 1)])
def test_stirling_matches_enumeration(p, l):
    assert stirling2(p, l) == set_partitions(p, l)


def test_stirling_examples():
    assert stirling2(3, 2) == 3 and stirling2(4, 2) == 7
    assert all(stirling2(p, 1) == 1 and stirling2(p, p) == 1 for p in range(1, 30))


def test_stirling_domain():
    for p, l in [(0, 0), (3, 0), (3, 4), (-1, 1)]:
        with pytest.raises(DomainError):
            stirling2(p, l)


@pytest.mark.parametrize("p", range(1, 16))
def test_stirling_polynomial_identity(p):
    for x in range(p + 1):
        assert sum(stirling2(p, l) * math.factorial(l) * math.comb(x, l) for l in range(1, p + 1)) == x**p


def test_stirling_table_recurrence():
    vals = StirlingTable(12).values
    for p in range(1, 12):
        for l in range(2, p + 1):
            assert vals[(p + 1, l)] == l * vals[(p, l)] + vals[(p, l - 1)]
    assert len(vals) == 12 * 13 // 2


@given(st.floats(1e-3, 10), st.floats(0, 5), st.floats(0, 5))
def test_moment_bound_p2(eps, n1, n2):
    assert moment_bound(2, eps, [n1, n2]) == pytest.approx(eps * n1 + 2 * eps**2 * n2**2, rel=1e-14)


def test_moment_bound_values_and_errors():
    # Static(1) on Z^2: norms 4 and 2, b = 1
    assert moment_bound(1, 1.0, [4.0]) == 4.0
    assert moment_bound(2, 1.0, [4.0, 2.0]) == 4.0 + 2 * 4.0
    with pytest.raises(DomainError):
        moment_bound(3, 1.0, [1.0, 1.0])


def test_moment_bound_uses_upper_confidence_limit():
    norms = [EnvNorm(1, 2.0, "monte_carlo", 0.1), EnvNorm(2, 2.0, "analytic")]
    assert moment_bound(2, 1.0, norms) == pytest.approx(2.1 + 2 * 4.0)
