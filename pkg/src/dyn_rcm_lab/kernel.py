"""Exact transition kernels on finite lattices by uniformization.

Between breakpoints the generator is constant, so ``P_{s,t}`` is the ordered
product of ``exp(L_i dt_i)`` over the constant pieces.  Each factor is
computed as a Poisson(lambda dt) mixture of powers of ``Q = I + L / lambda``
and truncated once the remaining Poisson mass drops below the tolerance, so
rows lose at most that much mass.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numba
import numpy as np

from .environment import ConductanceTrajectory, EnvironmentSpec, EnvNorm, reverse_environment, sample_environment
from .errors import DomainError
from .lattice import Ball, Lattice, ball_members
from .seeding import as_seed

DEFAULT_TOL = 1e-12
MAX_VERTICES = 4096
# Poisson means above this are split into substeps so exp(-a) stays well inside double range
_MAX_MEAN = 30.0


@dataclass(eq=False)
class GeneratorMatrix:
    lattice: Lattice
    time: float
    entries: np.ndarray


@dataclass(eq=False)
class KernelMatrix:
    lattice: Lattice
    s: float
    t: float
    entries: np.ndarray
    tolerance: float


def _dense_generator(lattice: Lattice, eta: np.ndarray) -> np.ndarray:
    n = lattice.n_vertices
    L = np.zeros((n, n))
    a, b = lattice.edge_array[:, 0], lattice.edge_array[:, 1]
    np.add.at(L, (a, b), eta)
    np.add.at(L, (b, a), eta)
    L[np.diag_indices(n)] = -L.sum(axis=1)
    return L


def generator_at(traj: ConductanceTrajectory, t: float) -> GeneratorMatrix:
    return GeneratorMatrix(traj.lattice, t, _dense_generator(traj.lattice, traj.values_at(t)))


def _check_size(lattice: Lattice):
    if lattice.n_vertices > MAX_VERTICES:
        raise DomainError(f"{lattice} has more than {MAX_VERTICES} vertices")


def _expm_uniformized(L: np.ndarray, dt: float, tol: float) -> np.ndarray:
    n = L.shape[0]
    lam = float(np.max(-np.diag(L))) if n else 0.0
    if lam == 0.0 or dt == 0.0:
        return np.eye(n)
    steps = max(1, math.ceil(lam * dt / _MAX_MEAN))
    a = lam * dt / steps
    Q = np.eye(n) + L / lam
    step_tol = tol / steps
    w = math.exp(-a)
    term = np.eye(n)
    acc = w * term
    mass, k = w, 0
    while 1.0 - mass > step_tol and k < 100000:
        k += 1
        term = term @ Q
        w *= a / k
        acc += w * term
        mass += w
    return np.linalg.matrix_power(acc, steps)


def _pieces_between(traj: ConductanceTrajectory, lo: float, hi: float) -> np.ndarray:
    cuts = traj.change_times()
    cuts = cuts[(cuts > lo) & (cuts < hi)]
    return np.concatenate(([lo], cuts, [hi]))


def transition_kernel(traj: ConductanceTrajectory, s: float, t: float, tol: float = DEFAULT_TOL) -> KernelMatrix:
    """``P_{s,t}``; for ``s > t`` the walk runs backwards through the pieces."""
    if tol <= 0:
        raise DomainError("tol must be positive")
    for r in (s, t):
        if not traj.window.contains(r):
            raise DomainError(f"time {r} outside the trajectory window")
    lat = traj.lattice
    _check_size(lat)
    n = lat.n_vertices
    if s == t:
        return KernelMatrix(lat, s, t, np.eye(n), 0.0)
    lo, hi = min(s, t), max(s, t)
    grid = _pieces_between(traj, lo, hi)
    factors = []
    for a, b in zip(grid[:-1], grid[1:]):
        eta = traj.values_at(a)
        factors.append((_dense_generator(lat, eta), b - a))
    if s > t:
        factors.reverse()
    per_factor = tol / len(factors)
    P = np.eye(n)
    for L, dt in factors:
        P = P @ _expm_uniformized(L, dt, per_factor)
    return KernelMatrix(lat, s, t, P, tol)


# -- vector propagation ------------------------------------------------------


@numba.njit(cache=True)
def _expv(v, eta, ea, eb, lam, dt, tol, term, nxt):
    """In-place exp(L dt) v for the edge-list generator, by uniformization.

    Returns the number of truncated series used (each contributes <= tol).
    """
    if lam == 0.0 or dt <= 0.0:
        return 0
    steps = max(1, int(math.ceil(lam * dt / 30.0)))
    a = lam * dt / steps
    inv = 1.0 / lam
    m = ea.shape[0]
    n = v.shape[0]
    for _ in range(steps):
        w = math.exp(-a)
        for i in range(n):
            term[i] = v[i]
            v[i] *= w
        mass = w
        k = 0
        while 1.0 - mass > tol and k < 100000:
            k += 1
            for i in range(n):
                nxt[i] = term[i]
            for e in range(m):
                c = eta[e]
                if c != 0.0:
                    f = c * inv * (term[eb[e]] - term[ea[e]])
                    nxt[ea[e]] += f
                    nxt[eb[e]] -= f
            w *= a / k
            for i in range(n):
                term[i] = nxt[i]
                v[i] += w * nxt[i]
            mass += w
    return steps


@numba.njit(cache=True)
def _propagate(v, eta, ea, eb, lam, t0, ev_t, ev_e, ev_val, out_t, tol):
    res = np.empty((out_t.shape[0], v.shape[0]))
    term = np.empty_like(v)
    nxt = np.empty_like(v)
    t = t0
    j = 0
    n_ev = ev_t.shape[0]
    n_pieces = 0
    for o in range(out_t.shape[0]):
        target = out_t[o]
        while j < n_ev and ev_t[j] <= target:
            n_pieces += _expv(v, eta, ea, eb, lam, ev_t[j] - t, tol, term, nxt)
            t = ev_t[j]
            while j < n_ev and ev_t[j] == t:
                eta[ev_e[j]] = ev_val[j]
                j += 1
        n_pieces += _expv(v, eta, ea, eb, lam, target - t, tol, term, nxt)
        t = target
        res[o] = v
    return res, n_pieces


def propagate(traj: ConductanceTrajectory, v0, t0: float, out_times, tol: float = DEFAULT_TOL):
    """Rows ``v0 P_{t0, t}`` for increasing ``out_times`` >= t0.

    The generator is symmetric, so the same update gives ``P_{t0,t} v0`` as a
    column once the pieces are traversed in reverse; see :func:`kernel_column`.
    Returns ``(rows, error_bound)`` with the accumulated truncation bound.
    """
    out_times = np.asarray(out_times, dtype=float)
    if len(out_times) and (np.any(np.diff(out_times) < 0) or out_times[0] < t0):
        raise DomainError("output times must be increasing and not before t0")
    if len(out_times) and not (traj.window.contains(t0) and traj.window.contains(out_times[-1])):
        raise DomainError("propagation range leaves the trajectory window")
    lat = traj.lattice
    init, ev_t, ev_e, ev_val = traj.change_list(drop_noops=True)
    eta = traj.values_at(t0).astype(float)
    keep = ev_t > t0
    lam = float(lat.degrees.max() * traj.max_value) if lat.n_edges else 0.0
    rows, n_series = _propagate(
        np.asarray(v0, dtype=float).copy(),
        eta,
        lat.edge_array[:, 0].copy(),
        lat.edge_array[:, 1].copy(),
        lam,
        float(t0),
        ev_t[keep].astype(float),
        ev_e[keep].astype(np.int64),
        ev_val[keep].astype(float),
        out_times,
        tol,
    )
    return rows, n_series * tol


def kernel_row(traj: ConductanceTrajectory, u, s: float, t: float, tol: float = DEFAULT_TOL) -> np.ndarray:
    """``P_{s,t}(u, .)`` for any order of s and t."""
    lat = traj.lattice
    v0 = np.zeros(lat.n_vertices)
    v0[lat.vertex_id(u)] = 1.0
    if t >= s:
        return propagate(traj, v0, s, [t], tol)[0][0]
    return propagate(reverse_environment(traj), v0, -s, [-t], tol)[0][0]


def kernel_column(traj: ConductanceTrajectory, v, s: float, t: float, tol: float = DEFAULT_TOL) -> np.ndarray:
    """``P_{s,t}(., v)``: apply the symmetric factors right to left."""
    lat = traj.lattice
    e = np.zeros(lat.n_vertices)
    e[lat.vertex_id(v)] = 1.0
    if t >= s:
        # factors of [s, t] applied last-to-first == forward pass of the reversed field over [-t, -s]
        return propagate(reverse_environment(traj), e, -t, [-s], tol)[0][0]
    return propagate(traj, e, t, [s], tol)[0][0]


def backward_collision_sum(traj: ConductanceTrajectory, origin, M: int, tol: float = DEFAULT_TOL) -> np.ndarray:
    """Partial sums ``S_m = sum_{j=1}^m sum_x P_{0,-j}(origin, x)^2`` for m = 1..M."""
    if M < 1:
        raise DomainError("M must be >= 1")
    if not (traj.window.contains(0.0) and traj.window.contains(-float(M))):
        raise DomainError(f"window {traj.window} does not cover [-{M}, 0]")
    lat = traj.lattice
    v0 = np.zeros(lat.n_vertices)
    v0[lat.vertex_id(origin)] = 1.0
    rows, _ = propagate(reverse_environment(traj), v0, 0.0, np.arange(1, M + 1, dtype=float), tol)
    return np.cumsum(np.sum(rows**2, axis=1))


def cauchy_schwarz_bound(kernel_row, ball: Ball, lattice: Lattice) -> float:
    """``(sum_{x in ball} row(x))^2 / |ball|``, checked against ``sum row(x)^2``."""
    row = np.asarray(kernel_row, dtype=float)
    if row.sum() > 1 + 1e-9:
        raise DomainError("kernel row must have total mass at most 1")
    members = ball_members(lattice, ball)
    if not members:
        raise DomainError("empty ball")
    ids = [lattice.vertex_id(v) for v in members]
    mass = row[ids].sum()
    bound = mass * mass / len(ids)
    collision = float(np.sum(row[ids] ** 2))
    if bound > collision * (1 + 1e-12) + 1e-300:
        raise ArithmeticError(f"Cauchy-Schwarz violated: {bound} > {collision}")
    return float(bound)


@dataclass
class MassTransportResult:
    lhs: float
    rhs: float
    lhs_se: float
    rhs_se: float
    diff_se: float
    replicas: int

    @property
    def agrees(self) -> bool:
        return abs(self.lhs - self.rhs) <= 3 * self.diff_se + 1e-12

    def to_json(self) -> dict:
        return dict(self.__dict__, agrees=self.agrees)


def mass_transport_sides(traj: ConductanceTrajectory, origin, m: float, tol: float = DEFAULT_TOL):
    """``(sum_x P_{0,m}(o,x)^2, sum_x P_{0,m}(x,o)^2)`` for one environment."""
    row = kernel_row(traj, origin, 0.0, m, tol)
    col = kernel_column(traj, origin, 0.0, m, tol)
    return float(row @ row), float(col @ col)


def mass_transport_check(spec: EnvironmentSpec, m: int, replicas: int, seed=0, tol: float = DEFAULT_TOL):
    """Both sides of the mass-transport identity for ``f(u,v) = E[P_{0,m}(u,v)^2]``."""
    if not spec.lattice.is_torus:
        raise DomainError("mass transport needs a translation-invariant (torus) lattice")
    if replicas < 1:
        raise DomainError("replicas must be >= 1")
    base = as_seed(seed)
    spec = spec.with_window(0.0, float(m))
    origin = spec.lattice.origin
    sides = np.array(
        [mass_transport_sides(sample_environment(spec, base.derive(i)), origin, m, tol) for i in range(replicas)]
    )
    lhs, rhs = sides[:, 0], sides[:, 1]
    if replicas > 1:
        se = lambda x: float(np.std(x, ddof=1) / math.sqrt(replicas))  # noqa: E731
        lhs_se, rhs_se, diff_se = se(lhs), se(rhs), se(lhs - rhs)
    else:
        lhs_se = rhs_se = diff_se = 0.0
    return MassTransportResult(float(lhs.mean()), float(rhs.mean()), lhs_se, rhs_se, diff_se, replicas)


# -- moment bound ------------------------------------------------------------


@lru_cache(maxsize=None)
def stirling2(p: int, l: int) -> int:
    """Stirling numbers of the second kind, {p brace l}."""
    if p < 1 or l < 1 or l > p:
        raise DomainError(f"need 1 <= l <= p, got p={p}, l={l}")
    if l == 1 or l == p:
        return 1
    return l * stirling2(p - 1, l) + stirling2(p - 1, l - 1)


@dataclass(frozen=True)
class StirlingTable:
    max_p: int

    @property
    def values(self) -> dict[tuple[int, int], int]:
        return {(p, l): stirling2(p, l) for p in range(1, self.max_p + 1) for l in range(1, p + 1)}


def moment_bound(p: int, length: float, norms) -> float:
    """``sum_l {p brace l} l! length^l ||eta||_l^l`` with ``norms[l-1] = ||eta||_l``."""
    norms = list(norms)
    if len(norms) < p:
        raise DomainError(f"need norms for l = 1..{p}, got {len(norms)}")
    total = 0.0
    for l in range(1, p + 1):
        nl = norms[l - 1]
        val = nl.value + nl.ci_halfwidth if isinstance(nl, EnvNorm) else float(nl)
        total += stirling2(p, l) * math.factorial(l) * length**l * val**l
    return total
