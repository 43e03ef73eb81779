"""Piecewise-constant dynamic conductance fields.

An environment assigns every edge a cadlag, piecewise-constant, non-negative
conductance over a finite time window.  Per edge we store the breakpoints
``t_0 = window.start < t_1 < ... < t_n`` and the values ``v_0..v_n``, where
``v_i`` holds on ``[t_i, t_{i+1})``.

Four stationary laws are supported: a static field, dynamical percolation,
a field driven by the symmetric exclusion process, and the deterministic
random-phase field ``amplitude * (1 + sin(t + theta)) / 2``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Union

import numpy as np
from scipy import stats

from .errors import DomainError
from .lattice import Lattice, LatticeError
from .seeding import as_seed


@dataclass(frozen=True)
class TimeWindow:
    start: float
    end: float

    def __post_init__(self):
        if not self.start < self.end:
            raise DomainError(f"window start {self.start} must precede end {self.end}")

    @property
    def length(self) -> float:
        return self.end - self.start

    def contains(self, t: float) -> bool:
        return self.start <= t <= self.end

    def covers(self, other: "TimeWindow") -> bool:
        return self.start <= other.start and other.end <= self.end

    def negate(self) -> "TimeWindow":
        return TimeWindow(-self.end, -self.start)

    def shift(self, t: float) -> "TimeWindow":
        return TimeWindow(self.start + t, self.end + t)

    def to_json(self) -> dict:
        return {"start": self.start, "end": self.end}


# -- environment laws ------------------------------------------------------


@dataclass(frozen=True)
class Static:
    c: float = 1.0

    def validate(self):
        if not self.c >= 0:
            raise DomainError("Static: c must be >= 0")

    @property
    def max_value(self) -> float:
        return self.c

    def sample_edge(self, rng, window: TimeWindow):
        return np.array([window.start]), np.array([float(self.c)])


@dataclass(frozen=True)
class DynamicalPercolation:
    p: float = 0.5
    mu: float = 1.0

    def validate(self):
        if not 0 <= self.p <= 1:
            raise DomainError("DynamicalPercolation: p must lie in [0, 1]")
        if not self.mu > 0:
            raise DomainError("DynamicalPercolation: mu must be > 0")

    @property
    def max_value(self) -> float:
        return 1.0 if self.p > 0 else 0.0

    def sample_edge(self, rng, window: TimeWindow):
        n = rng.poisson(self.mu * window.length)
        refresh = np.sort(rng.uniform(window.start, window.end, n))
        states = (rng.random(n + 1) < self.p).astype(float)
        return np.concatenate(([window.start], refresh)), states


@dataclass(frozen=True)
class Exclusion:
    density: float = 0.5
    hop_rate: float = 1.0
    low: float = 0.0
    high: float = 1.0

    def validate(self):
        if not 0 <= self.density <= 1:
            raise DomainError("Exclusion: density must lie in [0, 1]")
        if not self.hop_rate > 0:
            raise DomainError("Exclusion: hop_rate must be > 0")
        if not 0 <= self.low <= self.high:
            raise DomainError("Exclusion: need 0 <= low <= high")

    @property
    def max_value(self) -> float:
        return self.high


@dataclass(frozen=True)
class DeterministicPhase:
    amplitude: float = 1.0
    step: float = 0.01

    def validate(self):
        if not self.amplitude >= 0:
            raise DomainError("DeterministicPhase: amplitude must be >= 0")
        if not self.step > 0:
            raise DomainError("DeterministicPhase: step must be > 0")

    @property
    def max_value(self) -> float:
        return self.amplitude

    def sample_shared(self, rng, window: TimeWindow):
        theta = rng.uniform(0.0, 2 * math.pi)
        return self.grid(theta, window)

    def grid(self, theta: float, window: TimeWindow):
        # grid anchored at multiples of step so time shifts by whole steps commute
        k0 = math.floor(window.start / self.step)
        k1 = math.ceil(window.end / self.step)
        edges = np.arange(k0, k1 + 1) * self.step
        edges = edges[(edges > window.start) & (edges < window.end)]
        bps = np.concatenate(([window.start], edges))
        ends = np.concatenate((edges, [window.end]))
        mids = 0.5 * (bps + ends)
        vals = self.amplitude * (1.0 + np.sin(mids + theta)) / 2.0
        return bps, vals


EnvKind = Union[Static, DynamicalPercolation, Exclusion, DeterministicPhase]

KIND_NAMES = {
    Static: "static",
    DynamicalPercolation: "dynamical_percolation",
    Exclusion: "exclusion",
    DeterministicPhase: "deterministic_phase",
}
KINDS_BY_NAME = {v: k for k, v in KIND_NAMES.items()}


def kind_to_json(kind: EnvKind) -> dict:
    out = {"kind": KIND_NAMES[type(kind)]}
    out.update(kind.__dict__)
    return out


def kind_from_json(d: dict) -> EnvKind:
    d = dict(d)
    cls = KINDS_BY_NAME[d.pop("kind")]
    kind = cls(**d)
    kind.validate()
    return kind


@dataclass(frozen=True)
class EnvironmentSpec:
    kind: EnvKind
    lattice: Lattice
    window: TimeWindow

    def __post_init__(self):
        self.kind.validate()

    def with_window(self, start: float, end: float) -> "EnvironmentSpec":
        return replace(self, window=TimeWindow(start, end))

    def with_lattice(self, lattice: Lattice) -> "EnvironmentSpec":
        return replace(self, lattice=lattice)

    @property
    def is_zero(self) -> bool:
        return self.kind.max_value == 0

    @property
    def strongly_reversible(self) -> bool:
        return not isinstance(self.kind, DeterministicPhase)


# -- trajectories ----------------------------------------------------------


class ConductanceTrajectory:
    """Realised environment: per-edge breakpoints and values over a window."""

    def __init__(self, lattice: Lattice, window: TimeWindow, breakpoints, values, meta=None):
        if len(breakpoints) != lattice.n_edges or len(values) != lattice.n_edges:
            raise DomainError("need one breakpoint/value list per edge")
        self.lattice = lattice
        self.window = window
        self.breakpoints = [np.asarray(b, dtype=float) for b in breakpoints]
        self.values = [np.asarray(v, dtype=float) for v in values]
        self.meta = dict(meta or {})
        for b, v in zip(self.breakpoints, self.values):
            if len(b) != len(v) or len(b) == 0:
                raise DomainError("each edge needs matching, non-empty breakpoints and values")
            if b[0] != window.start or b[-1] > window.end:
                raise DomainError("breakpoints must start at window.start and lie in the window")
            if len(b) > 1 and not np.all(np.diff(b) > 0):
                raise DomainError("breakpoints must be strictly increasing")
            if np.any(v < 0):
                raise DomainError("conductances must be non-negative")

    @property
    def max_value(self) -> float:
        return max((float(v.max()) for v in self.values), default=0.0)

    def edge(self, eid: int):
        return self.breakpoints[eid], self.values[eid]

    def _check_time(self, t):
        if not self.window.contains(t):
            raise DomainError(f"time {t} outside window [{self.window.start}, {self.window.end}]")

    def value(self, eid: int, t: float) -> float:
        self._check_time(t)
        b = self.breakpoints[eid]
        return float(self.values[eid][np.searchsorted(b, t, side="right") - 1])

    def values_at(self, t: float) -> np.ndarray:
        self._check_time(t)
        return np.array(
            [v[np.searchsorted(b, t, side="right") - 1] for b, v in zip(self.breakpoints, self.values)]
        )

    def total_conductance(self, x, t: float) -> float:
        xid = self.lattice.vertex_id(x)
        return sum(self.value(eid, t) for eid, _ in self.lattice.adjacency[xid])

    def change_times(self) -> np.ndarray:
        """Union of all interior breakpoints, sorted."""
        inner = [b[1:] for b in self.breakpoints if len(b) > 1]
        if not inner:
            return np.empty(0)
        return np.unique(np.concatenate(inner))

    def change_list(self, drop_noops: bool = False):
        """(initial values, change times, edge ids, new values), time-sorted.

        ``drop_noops`` skips breakpoints where the value does not change.
        """
        init = np.array([v[0] for v in self.values])
        times, eids, vals = [], [], []
        for eid, (b, v) in enumerate(zip(self.breakpoints, self.values)):
            if len(b) > 1:
                keep = v[1:] != v[:-1] if drop_noops else np.ones(len(b) - 1, dtype=bool)
                times.append(b[1:][keep])
                eids.append(np.full(int(keep.sum()), eid))
                vals.append(v[1:][keep])
        if not times:
            return init, np.empty(0), np.empty(0, dtype=np.int64), np.empty(0)
        times = np.concatenate(times)
        eids = np.concatenate(eids)
        vals = np.concatenate(vals)
        order = np.lexsort((eids, times))
        return init, times[order], eids[order], vals[order]

    def restrict(self, window: TimeWindow) -> "ConductanceTrajectory":
        if not self.window.covers(window):
            raise DomainError("restriction window must lie inside the trajectory window")
        bps, vals = [], []
        for b, v in zip(self.breakpoints, self.values):
            i0 = np.searchsorted(b, window.start, side="right") - 1
            i1 = np.searchsorted(b, window.end, side="left")
            nb = b[i0:i1].copy()
            nb[0] = window.start
            bps.append(nb)
            vals.append(v[i0:i1].copy())
        return ConductanceTrajectory(self.lattice, window, bps, vals, self.meta)

    def equals(self, other: "ConductanceTrajectory") -> bool:
        return (
            self.lattice == other.lattice
            and self.window == other.window
            and all(np.array_equal(a, b) for a, b in zip(self.breakpoints, other.breakpoints))
            and all(np.array_equal(a, b) for a, b in zip(self.values, other.values))
        )

    def to_json(self) -> dict:
        return {
            "lattice": self.lattice.to_json(),
            "window": self.window.to_json(),
            "meta": {k: v for k, v in self.meta.items() if isinstance(v, (int, float, str, bool))},
            "edges": [
                {"edge_id": eid, "breakpoints": b.tolist(), "values": v.tolist()}
                for eid, (b, v) in enumerate(zip(self.breakpoints, self.values))
            ],
        }

    @classmethod
    def from_json(cls, d: dict) -> "ConductanceTrajectory":
        lat = Lattice(**d["lattice"])
        win = TimeWindow(**d["window"])
        edges = sorted(d["edges"], key=lambda e: e["edge_id"])
        if [e["edge_id"] for e in edges] != list(range(lat.n_edges)):
            raise DomainError("trajectory JSON must list every edge id exactly once")
        return cls(lat, win, [e["breakpoints"] for e in edges], [e["values"] for e in edges], d.get("meta"))

    def __repr__(self):
        n = sum(len(b) for b in self.breakpoints)
        return f"ConductanceTrajectory({self.lattice!r}, {self.window}, {n} pieces)"


def constant_trajectory(lattice: Lattice, window: TimeWindow, c: float = 1.0) -> ConductanceTrajectory:
    m = lattice.n_edges
    return ConductanceTrajectory(lattice, window, [[window.start]] * m, [[c]] * m)


# -- sampling ----------------------------------------------------------------


def sample_exclusion(spec: EnvironmentSpec, rng: np.random.Generator):
    """Stirring-dynamics exclusion process and the conductances it induces.

    Returns ``(trajectory, driver)`` where ``driver`` holds the initial
    occupancy and the swap events that moved a particle.
    """
    kind: Exclusion = spec.kind
    lat, win = spec.lattice, spec.window
    occ = rng.random(lat.n_vertices) < kind.density
    initial = occ.copy()
    ends = lat.edge_array
    m = lat.n_edges

    def edge_value(eid):
        a, b = ends[eid]
        return kind.high if (occ[a] or occ[b]) else kind.low

    current = np.array([edge_value(e) for e in range(m)], dtype=float)
    bps = [[win.start] for _ in range(m)]
    vals = [[current[e]] for e in range(m)]
    n_events = rng.poisson(kind.hop_rate * m * win.length)
    times = np.sort(rng.uniform(win.start, win.end, n_events))
    which = rng.integers(0, m, n_events)
    swaps = []
    adj = lat.adjacency
    for t, eid in zip(times.tolist(), which.tolist()):
        a, b = ends[eid]
        if occ[a] == occ[b]:
            continue
        occ[a], occ[b] = occ[b], occ[a]
        swaps.append((t, int(a), int(b)))
        touched = {e for e, _ in adj[a]} | {e for e, _ in adj[b]}
        for e in sorted(touched):
            v = edge_value(e)
            if v != current[e]:
                current[e] = v
                bps[e].append(t)
                vals[e].append(v)
    traj = ConductanceTrajectory(lat, win, bps, vals)
    return traj, {"initial": initial, "swaps": swaps}


def _sample_with_rng(spec: EnvironmentSpec, rng: np.random.Generator) -> ConductanceTrajectory:
    kind, lat, win = spec.kind, spec.lattice, spec.window
    m = lat.n_edges
    if isinstance(kind, Static):
        return constant_trajectory(lat, win, kind.c)
    if isinstance(kind, DynamicalPercolation):
        counts = rng.poisson(kind.mu * win.length, m)
        times = rng.uniform(win.start, win.end, counts.sum())
        states = (rng.random(counts.sum() + m) < kind.p).astype(float)
        splits = np.cumsum(counts)[:-1]
        bps, vals = [], []
        for eid, chunk in enumerate(np.split(times, splits)):
            bps.append(np.concatenate(([win.start], np.sort(chunk))))
        vsplits = np.cumsum(counts + 1)[:-1]
        vals = np.split(states, vsplits)
        return ConductanceTrajectory(lat, win, bps, vals, {"kind": "dynamical_percolation"})
    if isinstance(kind, Exclusion):
        return sample_exclusion(spec, rng)[0]
    if isinstance(kind, DeterministicPhase):
        b, v = kind.sample_shared(rng, win)
        return ConductanceTrajectory(lat, win, [b] * m, [v] * m, {"discretization_step": kind.step})
    raise DomainError(f"unknown environment kind {kind!r}")


def sample_environment(spec: EnvironmentSpec, seed) -> ConductanceTrajectory:
    """Draw a trajectory from the stationary law of ``spec`` over its window."""
    spec.kind.validate()
    return _sample_with_rng(spec, as_seed(seed).rng())


class LazyEnvironment:
    """Environment whose edges are realised on first access.

    Exact for laws with independent edges (static, dynamical percolation) and
    for the shared-phase field; the exclusion field is sampled eagerly since
    its edges are coupled.
    """

    def __init__(self, spec: EnvironmentSpec, rng: np.random.Generator):
        self.spec = spec
        self.lattice = spec.lattice
        self.window = spec.window
        self._rng = rng
        self._cache: dict[int, tuple[np.ndarray, np.ndarray]] = {}
        self._shared = None
        self._eager = None
        kind = spec.kind
        if isinstance(kind, DeterministicPhase):
            self._shared = kind.sample_shared(rng, spec.window)
        elif isinstance(kind, Exclusion):
            self._eager = sample_exclusion(spec, rng)[0]
        elif isinstance(kind, Static):
            self._shared = kind.sample_edge(rng, spec.window)

    @property
    def max_value(self) -> float:
        return self.spec.kind.max_value

    def edge(self, eid: int):
        if self._shared is not None:
            return self._shared
        if self._eager is not None:
            return self._eager.edge(eid)
        out = self._cache.get(eid)
        if out is None:
            out = self.spec.kind.sample_edge(self._rng, self.window)
            self._cache[eid] = out
        return out


# -- transformations -------------------------------------------------------


def reverse_environment(traj: ConductanceTrajectory) -> ConductanceTrajectory:
    """Time reversal: output value at t is the input value at -t."""
    win = traj.window.negate()
    bps, vals = [], []
    for b, v in zip(traj.breakpoints, traj.values):
        bps.append(np.concatenate(([win.start], -b[1:][::-1])))
        vals.append(v[::-1].copy())
    return ConductanceTrajectory(traj.lattice, win, bps, vals, traj.meta)


def shift_environment(traj: ConductanceTrajectory, x, t: float) -> ConductanceTrajectory:
    """Space-time shift: output value at (e, s) is the input value at (e - x, s - t)."""
    lat = traj.lattice
    x = tuple(x) if x is not None else lat.origin
    if any(x) and not lat.is_torus:
        raise LatticeError("spatial shifts are only defined on tori")
    # output edge e reads input edge e - x
    src = lat.edge_translation_map(tuple(-a for a in x)) if any(x) else np.arange(lat.n_edges)
    win = traj.window.shift(t)
    bps = [traj.breakpoints[s] + t for s in src]
    vals = [traj.values[s].copy() for s in src]
    return ConductanceTrajectory(lat, win, bps, vals, traj.meta)


# -- norms -------------------------------------------------------------------


@dataclass
class EnvNorm:
    p: int
    value: float
    method: str
    ci_halfwidth: float = 0.0
    flagged: bool = False
    details: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "p": self.p,
            "value": self.value,
            "method": self.method,
            "ci_halfwidth": self.ci_halfwidth,
            "flagged": self.flagged,
            "details": self.details,
        }


def _origin_degree(lattice: Lattice) -> int:
    return int(lattice.degrees[lattice.vertex_id(lattice.origin)])


def _binomial_moment(n: int, q: float, p: int, f=lambda k: k) -> float:
    ks = np.arange(n + 1)
    pmf = stats.binom.pmf(ks, n, q)
    return float(sum(pmf[k] * f(k) ** p for k in ks))


def _analytic_moment(spec: EnvironmentSpec, p: int) -> float:
    """E[eta_0(0)^p] for bounded cadlag stationary laws."""
    kind = spec.kind
    deg = _origin_degree(spec.lattice)
    if isinstance(kind, Static):
        return float((deg * kind.c) ** p)
    if isinstance(kind, DynamicalPercolation):
        return _binomial_moment(deg, kind.p, p)
    if isinstance(kind, Exclusion):
        rho = kind.density
        occupied = rho * (deg * kind.high) ** p
        free = (1 - rho) * _binomial_moment(deg, rho, p, lambda k: k * kind.high + (deg - k) * kind.low)
        return float(occupied + free)
    if isinstance(kind, DeterministicPhase):
        # E[(1 + sin theta)^p] with E[sin^{2j}] = C(2j, j) / 4^j and odd moments 0
        m = sum(math.comb(p, 2 * j) * math.comb(2 * j, j) / 4**j for j in range(p // 2 + 1))
        return float((deg * kind.amplitude / 2) ** p * m)
    raise DomainError(f"no closed form for {kind!r}")


def _integrated_origin_conductance(spec: EnvironmentSpec, rng, eps: float) -> float:
    env = LazyEnvironment(spec.with_window(0.0, eps), rng)
    lat = spec.lattice
    total = 0.0
    for eid, _ in lat.adjacency[lat.vertex_id(lat.origin)]:
        b, v = env.edge(eid)
        ends = np.concatenate((b[1:], [eps]))
        total += float(np.sum(v * (ends - b)))
    return total


def infinitesimal_norm(
    spec: EnvironmentSpec,
    p: int,
    method: str = "analytic",
    *,
    eps: float = 2.0**-10,
    replicas: int = 20000,
    seed=0,
    tol: float = math.inf,
) -> EnvNorm:
    """The infinitesimal p-norm of the environment at the origin.

    ``analytic`` uses ``E[eta_0(0)^p]^(1/p)``, valid for the bounded cadlag
    laws here.  ``monte-carlo`` estimates
    ``(1/eps) E[(int_0^eps eta_s(0) ds)^p]^(1/p)`` and also reports the
    estimate at ``eps/2``.
    """
    if p < 1:
        raise DomainError("p must be >= 1")
    if method == "analytic":
        return EnvNorm(p, _analytic_moment(spec, p) ** (1.0 / p), "analytic")
    if method != "monte-carlo":
        raise DomainError(f"unknown method {method!r}")
    base = as_seed(seed)

    def estimate(e, stream):
        vals = np.array(
            [_integrated_origin_conductance(spec, base.derive(stream).derive(i).rng(), e) for i in range(replicas)]
        )
        m = float(np.mean(vals**p))
        se = float(np.std(vals**p, ddof=1) / math.sqrt(replicas)) if replicas > 1 else 0.0
        value = m ** (1.0 / p) / e
        # delta method for m -> m^(1/p)
        se_value = (m ** (1.0 / p - 1.0) / p) * se / e if m > 0 else 0.0
        return value, 3.0 * se_value

    value, ci = estimate(eps, 0)
    half_value, half_ci = estimate(eps / 2, 1)
    return EnvNorm(
        p,
        value,
        "monte-carlo",
        ci,
        flagged=ci > tol,
        details={"eps": eps, "value_at_half_eps": half_value, "ci_at_half_eps": half_ci, "replicas": replicas},
    )
