"""Poisson-clock walks in a piecewise-constant environment.

Every edge carries an inhomogeneous Poisson clock whose intensity is the
edge's conductance.  A walk started at ``(u, s)`` follows the clock rings
forwards in time, crossing an edge whenever it rings while the walk sits at
one of its endpoints, and backwards in time by the mirror rule.  The backward
half is computed as the forward half of the time-reversed clock process.

Clock processes come in two flavours sharing the ``next_after``/``prev_before``
interface: :class:`PointProcessSample` is fully realised, while
:class:`LazyPointProcess` reveals each edge in fixed time cells on demand,
which is exact by independence of Poisson increments and keeps large boxes
cheap.
"""

from __future__ import annotations

import math
import warnings
from bisect import bisect_left, bisect_right
from dataclasses import dataclass, field

import numpy as np

from .environment import ConductanceTrajectory, LazyEnvironment, TimeWindow
from .errors import DomainError
from .lattice import Lattice, Vertex
from .seeding import as_seed

INF = math.inf
DEFAULT_JUMP_CAP = 10**6
COLLISION_IDENTITY_RTOL = 1e-12


class TieError(RuntimeError):
    """Two incident clocks rang at exactly the same time."""


class CollisionIdentityError(RuntimeError):
    pass


# -- clock processes ---------------------------------------------------------


class PointProcessSample:
    """A realised clock process: sorted ring times for every edge."""

    def __init__(self, lattice: Lattice, window: TimeWindow, times):
        if len(times) != lattice.n_edges:
            raise DomainError("need one ring-time array per edge")
        self.lattice = lattice
        self.window = window
        self.times = [np.asarray(t, dtype=float) for t in times]
        for t in self.times:
            if len(t) and (t[0] < window.start or t[-1] > window.end):
                raise DomainError("ring times must lie inside the window")
        flat = np.concatenate(self.times) if self.times else np.empty(0)
        if len(np.unique(flat)) != len(flat):
            raise DomainError("ring times must be pairwise distinct")
        self._lists = [t.tolist() for t in self.times]

    @property
    def n_events(self) -> int:
        return sum(len(t) for t in self.times)

    @property
    def events(self) -> list[tuple[float, tuple]]:
        """All rings as (time, edge), sorted by time."""
        out = [(t, self.lattice.edges[eid]) for eid, ts in enumerate(self._lists) for t in ts]
        out.sort(key=lambda te: te[0])
        return out

    def next_after(self, eid: int, t: float) -> float:
        lst = self._lists[eid]
        i = bisect_right(lst, t)
        return lst[i] if i < len(lst) else INF

    def prev_before(self, eid: int, t: float) -> float:
        lst = self._lists[eid]
        i = bisect_left(lst, t)
        return lst[i - 1] if i > 0 else -INF

    def to_json(self) -> dict:
        return {
            "lattice": self.lattice.to_json(),
            "window": self.window.to_json(),
            "events": [{"time": t, "edge": [list(e[0]), list(e[1])]} for t, e in self.events],
        }


def _pieces(bps: np.ndarray, vals: np.ndarray, end: float, lo: float, hi: float):
    """Constant pieces of one edge clipped to [lo, hi): (starts, lengths, values)."""
    i0 = max(int(np.searchsorted(bps, lo, side="right")) - 1, 0)
    i1 = int(np.searchsorted(bps, hi, side="left"))
    nxt = np.append(bps[i0 + 1 : i1], end)
    starts = np.maximum(bps[i0:i1], lo)
    stops = np.minimum(nxt, hi)
    return starts, stops - starts, vals[i0:i1]


def _poisson_on_pieces(rng, starts, lengths, values) -> np.ndarray:
    counts = rng.poisson(values * lengths)
    n = int(counts.sum())
    if n == 0:
        return np.empty(0)
    t = np.repeat(starts, counts) + rng.random(n) * np.repeat(lengths, counts)
    t.sort()
    return t


def sample_point_process(traj: ConductanceTrajectory, seed) -> PointProcessSample:
    """Realise the Poisson clocks of every edge over the trajectory's window."""
    rng = as_seed(seed).rng()
    win = traj.window
    starts, lengths, values, owner = [], [], [], []
    for eid, (b, v) in enumerate(zip(traj.breakpoints, traj.values)):
        s, ln, val = _pieces(b, v, win.end, win.start, win.end)
        starts.append(s)
        lengths.append(ln)
        values.append(val)
        owner.append(np.full(len(s), eid))
    starts = np.concatenate(starts) if starts else np.empty(0)
    lengths = np.concatenate(lengths) if lengths else np.empty(0)
    values = np.concatenate(values) if values else np.empty(0)
    owner = np.concatenate(owner) if owner else np.empty(0, dtype=np.int64)

    counts = rng.poisson(values * lengths)
    piece = np.repeat(np.arange(len(starts)), counts)
    times = starts[piece] + rng.random(len(piece)) * lengths[piece]
    # ties have probability zero but floating point can realise them: resample the later one
    while len(times):
        order = np.argsort(times, kind="stable")
        dup = order[1:][np.diff(times[order]) == 0]
        if len(dup) == 0:
            break
        times[dup] = starts[piece[dup]] + rng.random(len(dup)) * lengths[piece[dup]]
    edge_of = owner[piece]
    order = np.lexsort((times, edge_of))
    times, edge_of = times[order], edge_of[order]
    bounds = np.searchsorted(edge_of, np.arange(traj.lattice.n_edges + 1))
    per_edge = [times[bounds[i] : bounds[i + 1]] for i in range(traj.lattice.n_edges)]
    return PointProcessSample(traj.lattice, win, per_edge)


class LazyPointProcess:
    """Clock process revealed cell by cell as the walk queries it.

    ``env`` is anything with ``lattice``, ``window``, ``max_value`` and
    ``edge(eid) -> (breakpoints, values)``.  Cells are sampled independently
    on first access.  Ties within a cell are resampled; ties across edges are
    detected by the walk and raise :class:`TieError`.
    """

    def __init__(self, env, rng: np.random.Generator, cell: float | None = None):
        self.env = env
        self.lattice = env.lattice
        self.window = env.window
        self._rng = rng
        rate = float(env.max_value)
        if cell is None:
            cell = 4.0 / rate if rate > 0 else self.window.length
        self.cell = min(cell, self.window.length)
        self._n_cells = max(int(math.ceil(self.window.length / self.cell)), 1)
        self._cells: dict[tuple[int, int], list[float]] = {}
        self._support: dict[int, tuple] = {}

    def _edge_info(self, eid: int):
        info = self._support.get(eid)
        if info is None:
            b, v = self.env.edge(eid)
            bl, vl = b.tolist(), v.tolist()
            pos = [i for i, x in enumerate(vl) if x > 0]
            if not pos:
                info = (bl, vl, INF, -INF)
            else:
                last = bl[pos[-1] + 1] if pos[-1] + 1 < len(bl) else self.window.end
                info = (bl, vl, bl[pos[0]], last)
            self._support[eid] = info
        return info

    def _cell(self, eid: int, k: int) -> list[float]:
        key = (eid, k)
        lst = self._cells.get(key)
        if lst is None:
            b, v, _, _ = self._edge_info(eid)
            lo = self.window.start + k * self.cell
            hi = min(lo + self.cell, self.window.end) if k < self._n_cells - 1 else self.window.end
            lst = self._sample_cell(b, v, lo, hi)
            while len(lst) > 1 and len(set(lst)) < len(lst):
                lst = self._sample_cell(b, v, lo, hi)
            self._cells[key] = lst
        return lst

    def _sample_cell(self, b: list, v: list, lo: float, hi: float) -> list[float]:
        # plain-Python piece walk: cells overlap few pieces and numpy call overhead dominates
        rng = self._rng
        out: list[float] = []
        i = max(bisect_right(b, lo) - 1, 0)
        n = len(b)
        while i < n and b[i] < hi:
            a = max(b[i], lo)
            z = min(b[i + 1] if i + 1 < n else self.window.end, hi)
            rate = v[i]
            if rate > 0 and z > a:
                c = int(rng.poisson(rate * (z - a)))
                if c:
                    out.extend((a + (z - a) * rng.random(c)).tolist())
            i += 1
        out.sort()
        return out

    def _cell_index(self, t: float) -> int:
        a, c = self.window.start, self.cell
        k = min(max(int((t - a) // c), 0), self._n_cells - 1)
        # the division can round across a cell boundary; settle against the cell's own lo
        while k > 0 and a + k * c > t:
            k -= 1
        while k < self._n_cells - 1 and a + (k + 1) * c <= t:
            k += 1
        return k

    def next_after(self, eid: int, t: float) -> float:
        _, _, first, last = self._edge_info(eid)
        if t >= last:
            return INF
        k = self._cell_index(max(t, first))
        while k < self._n_cells:
            lst = self._cell(eid, k)
            i = bisect_right(lst, t)
            if i < len(lst):
                return lst[i]
            k += 1
        return INF

    def prev_before(self, eid: int, t: float) -> float:
        _, _, first, last = self._edge_info(eid)
        if t <= first:
            return -INF
        k = self._cell_index(min(t, last))
        while k >= 0:
            lst = self._cell(eid, k)
            i = bisect_left(lst, t)
            if i > 0:
                return lst[i - 1]
            k -= 1
        return -INF

    def realise(self) -> PointProcessSample:
        """Reveal every cell of every edge and freeze the result."""
        times = []
        for eid in range(self.lattice.n_edges):
            ts = []
            for k in range(self._n_cells):
                ts.extend(self._cell(eid, k))
            times.append(np.array(ts))
        return PointProcessSample(self.lattice, self.window, times)


class ReversedProcess:
    """View of a clock process with time negated."""

    def __init__(self, pp):
        self.pp = pp
        self.lattice = pp.lattice
        self.window = pp.window.negate()

    def next_after(self, eid: int, t: float) -> float:
        return -self.pp.prev_before(eid, -t)

    def prev_before(self, eid: int, t: float) -> float:
        return -self.pp.next_after(eid, -t)


class RestrictedProcess:
    """Clock process of a host lattice seen only on the edges of a sub-box."""

    def __init__(self, pp, box: Lattice):
        if box.is_torus:
            raise DomainError("censoring needs a box lattice")
        self.pp = pp
        self.lattice = box
        self.window = pp.window
        host = pp.lattice
        self._host_id = [host.edge_id(e) for e in box.edges]

    def next_after(self, eid: int, t: float) -> float:
        return self.pp.next_after(self._host_id[eid], t)

    def prev_before(self, eid: int, t: float) -> float:
        return self.pp.prev_before(self._host_id[eid], t)


def reverse_point_process(pp: PointProcessSample) -> PointProcessSample:
    return PointProcessSample(pp.lattice, pp.window.negate(), [-t[::-1] for t in pp.times])


def shift_point_process(pp: PointProcessSample, x, t: float) -> PointProcessSample:
    """Rings ``(e, s)`` become ``(e - x, s - t)``."""
    lat = pp.lattice
    x = tuple(x)
    if any(x) and not lat.is_torus:
        raise DomainError("spatial shifts are only defined on tori")
    new_id = lat.edge_translation_map(tuple(-a for a in x)) if any(x) else np.arange(lat.n_edges)
    times = [None] * lat.n_edges
    for eid, ts in enumerate(pp.times):
        times[new_id[eid]] = ts - t
    return PointProcessSample(lat, pp.window.shift(-t), times)


def restrict_point_process(pp: PointProcessSample, box: Lattice) -> PointProcessSample:
    host = pp.lattice
    return PointProcessSample(box, pp.window, [pp.times[host.edge_id(e)] for e in box.edges])


# -- paths -----------------------------------------------------------------


@dataclass(eq=False)
class WalkPath:
    """A cadlag lattice path over a window.

    ``vertices[0]`` holds from ``window.start`` until ``times[0]``, and
    ``vertices[i]`` from ``times[i-1]`` on.  Beyond an explosion the path is
    undefined; ``forward_limit``/``backward_limit`` mark where.
    """

    lattice: Lattice
    window: TimeWindow
    start: tuple[Vertex, float]
    times: np.ndarray
    vertices: np.ndarray
    exploded_forward: bool = False
    exploded_backward: bool = False
    forward_limit: float = INF
    backward_limit: float = -INF
    boundary_hit: bool = False
    meta: dict = field(default_factory=dict)

    @property
    def n_jumps(self) -> int:
        return len(self.times)

    @property
    def exploded(self) -> bool:
        return self.exploded_forward or self.exploded_backward

    def _index(self, t):
        return np.searchsorted(self.times, t, side="right")

    def position_id(self, t: float) -> int | None:
        if not self.window.contains(t):
            raise DomainError(f"time {t} outside path window")
        if t >= self.forward_limit or t <= self.backward_limit:
            return None
        return int(self.vertices[self._index(t)])

    def position(self, t: float) -> Vertex | None:
        i = self.position_id(t)
        return None if i is None else self.lattice.vertex(i)

    def position_ids(self, ts) -> np.ndarray:
        """Vectorised cadlag evaluation (no explosion handling)."""
        return self.vertices[self._index(np.asarray(ts, dtype=float))]

    @property
    def jumps(self) -> list[tuple[float, Vertex]]:
        return [(float(t), self.lattice.vertex(int(v))) for t, v in zip(self.times, self.vertices[1:])]

    def same_function(self, other: "WalkPath") -> bool:
        return (
            self.window == other.window
            and np.array_equal(self.times, other.times)
            and np.array_equal(self.vertices, other.vertices)
            and self.forward_limit == other.forward_limit
            and self.backward_limit == other.backward_limit
        )

    def to_json(self) -> dict:
        return {
            "lattice": self.lattice.to_json(),
            "window": self.window.to_json(),
            "start": {"vertex": list(self.start[0]), "time": self.start[1]},
            "initial_vertex": list(self.lattice.vertex(int(self.vertices[0]))),
            "jumps": [{"time": t, "vertex": list(v)} for t, v in self.jumps],
            "exploded_forward": self.exploded_forward,
            "exploded_backward": self.exploded_backward,
            "boundary_hit": self.boundary_hit,
        }

    def trace_rows(self):
        """(time, vertex_id) rows for CSV dumps, starting at the window start."""
        yield self.window.start, int(self.vertices[0])
        for t, v in zip(self.times.tolist(), self.vertices[1:].tolist()):
            yield t, v


def _trace(pp, adj, x: int, t: float, t_end: float, cap: int):
    """Follow rings forward from (x, t) up to t_end; returns (times, vertices, limit)."""
    times: list[float] = []
    verts: list[int] = []
    nxt = pp.next_after
    while True:
        best = INF
        y_best = -1
        for e, y in adj[x]:
            tau = nxt(e, t)
            if tau < best:
                best, y_best = tau, y
            elif tau == best and tau != INF:
                raise TieError(f"clocks tied at time {tau}")
        if best > t_end:
            return times, verts, INF
        if len(times) >= cap:
            return times, verts, best
        t, x = best, y_best
        times.append(t)
        verts.append(x)


def build_path(U, start, jump_cap: int = DEFAULT_JUMP_CAP) -> WalkPath:
    """The path through ``start = (vertex, time)`` induced by the clocks ``U``."""
    if jump_cap <= 0:
        raise DomainError("jump_cap must be positive")
    lat, win = U.lattice, U.window
    u, s = tuple(start[0]), float(start[1])
    if not win.contains(s):
        raise DomainError(f"start time {s} outside window")
    uid = lat.vertex_id(u)
    adj = lat.adjacency
    f_times, f_verts, f_limit = _trace(U, adj, uid, s, win.end, jump_cap)
    b_times, b_verts, b_limit = _trace(ReversedProcess(U), adj, uid, -s, -win.start, jump_cap)
    times = np.array([-r for r in reversed(b_times)] + f_times, dtype=float)
    vertices = np.array(list(reversed(b_verts)) + [uid] + f_verts, dtype=np.int64)
    boundary = bool(lat.boundary_mask[vertices].any()) if not lat.is_torus else False
    return WalkPath(
        lat,
        win,
        (u, s),
        times,
        vertices,
        exploded_forward=f_limit != INF,
        exploded_backward=b_limit != INF,
        forward_limit=f_limit,
        backward_limit=-b_limit,
        boundary_hit=boundary,
    )


def censored_path(U, box: Lattice, start, jump_cap: int = DEFAULT_JUMP_CAP) -> WalkPath:
    """Walk driven by the rings of ``U`` on edges inside ``box`` only."""
    if not box.contains(start[0]):
        raise DomainError(f"start {tuple(start[0])} is outside {box}")
    return build_path(RestrictedProcess(U, box), start, jump_cap)


def first_exit_time(path: WalkPath, box: Lattice) -> float:
    """First jump time (after the start) at which the path leaves ``box``."""
    s = path.start[1]
    for t, v in zip(path.times.tolist(), path.vertices[1:].tolist()):
        if t > s and not box.contains(path.lattice.vertex(v)):
            return t
    return INF


def jump_count(path: WalkPath, a: float, b: float) -> int:
    """Number of jump times in [a, b]."""
    if a > b or not (path.window.contains(a) and path.window.contains(b)):
        raise DomainError(f"[{a}, {b}] is not inside the path window")
    if b >= path.forward_limit or a <= path.backward_limit:
        warnings.warn("interval reaches an explosion; the count is only a lower bound", stacklevel=2)
    return int(np.searchsorted(path.times, b, side="right") - np.searchsorted(path.times, a, side="left"))


def reverse_path(path: WalkPath) -> WalkPath:
    return WalkPath(
        path.lattice,
        path.window.negate(),
        (path.start[0], -path.start[1]),
        -path.times[::-1],
        path.vertices[::-1].copy(),
        exploded_forward=path.exploded_backward,
        exploded_backward=path.exploded_forward,
        forward_limit=-path.backward_limit,
        backward_limit=-path.forward_limit,
        boundary_hit=path.boundary_hit,
    )


def shift_path(path: WalkPath, x, t: float) -> WalkPath:
    """The path ``r -> path(r + t) - x``; matches :func:`shift_point_process`."""
    lat = path.lattice
    x = tuple(x)
    if any(x) and not lat.is_torus:
        raise DomainError("spatial shifts are only defined on tori")
    neg = tuple(-a for a in x)
    vmap = lat.translation_map(neg)
    return WalkPath(
        lat,
        path.window.shift(-t),
        (lat.translate(path.start[0], neg), path.start[1] - t),
        path.times - t,
        vmap[path.vertices],
        exploded_forward=path.exploded_forward,
        exploded_backward=path.exploded_backward,
        forward_limit=path.forward_limit - t,
        backward_limit=path.backward_limit - t,
        boundary_hit=path.boundary_hit,
    )


def walk_pair(env, start_x, start_y, seeds, jump_cap: int = DEFAULT_JUMP_CAP):
    """Two walks in the same environment driven by independent clocks."""
    sx, sy = (as_seed(s) for s in seeds)
    if sx == sy:
        raise DomainError("walk_pair needs two distinct seeds")
    ux = LazyPointProcess(env, sx.rng())
    uy = LazyPointProcess(env, sy.rng())
    return build_path(ux, start_x, jump_cap), build_path(uy, start_y, jump_cap)


def lazy_walk(spec, rng_env, rng_clock, start, jump_cap: int = DEFAULT_JUMP_CAP) -> WalkPath:
    """Annealed walk: fresh lazily-revealed environment and clocks."""
    env = LazyEnvironment(spec, rng_env)
    return build_path(LazyPointProcess(env, rng_clock), start, jump_cap)


# -- collisions --------------------------------------------------------------


@dataclass
class CollisionRecord:
    horizon: TimeWindow
    integer_collisions: int
    lebesgue_measure: float
    intervals: list[tuple[float, float]]
    unit_offset_measure: float = 0.0
    identity_rel_error: float = 0.0

    def to_json(self) -> dict:
        return {
            "horizon": self.horizon.to_json(),
            "integer_collisions": self.integer_collisions,
            "lebesgue_measure": self.lebesgue_measure,
            "intervals": [list(iv) for iv in self.intervals],
            "unit_offset_measure": self.unit_offset_measure,
            "identity_rel_error": self.identity_rel_error,
            "endpoint_convention": "cadlag",
        }


def _collision_intervals(x: WalkPath, y: WalkPath, h: TimeWindow):
    a, b = h.start, h.end
    cuts = np.concatenate(([a], x.times[(x.times > a) & (x.times < b)], y.times[(y.times > a) & (y.times < b)]))
    cuts = np.unique(cuts)
    same = x.position_ids(cuts) == y.position_ids(cuts)
    stops = np.append(cuts[1:], b)
    intervals = []
    i, n = 0, len(cuts)
    while i < n:
        if not same[i]:
            i += 1
            continue
        j = i
        while j + 1 < n and same[j + 1]:
            j += 1
        intervals.append((float(cuts[i]), float(stops[j])))
        i = j + 1
    return intervals


def _unit_offset_measure(intervals, h: TimeWindow) -> float:
    """Integral over s in [0,1) of #{n : X_{n+s} = Y_{n+s}}, by an s-sweep."""
    if not intervals:
        return 0.0
    lo = np.array([iv[0] for iv in intervals])
    hi = np.array([iv[1] for iv in intervals])
    n0 = np.floor(lo).astype(np.int64)
    n1 = np.ceil(hi).astype(np.int64)
    reps = np.maximum(n1 - n0, 1)
    idx = np.repeat(np.arange(len(lo)), reps)
    n = n0[idx] + (np.arange(len(idx)) - np.repeat(np.cumsum(reps) - reps, reps))
    s_lo = np.maximum(lo[idx], n) - n
    s_hi = np.minimum(hi[idx], n + 1) - n
    keep = s_hi > s_lo
    s_lo, s_hi = s_lo[keep], s_hi[keep]
    pts = np.concatenate((s_lo, s_hi))
    delta = np.concatenate((np.ones(len(s_lo)), -np.ones(len(s_hi))))
    order = np.argsort(pts, kind="stable")
    pts, delta = pts[order], delta[order]
    count = np.cumsum(delta)[:-1]
    return float(np.sum(count * np.diff(pts)))


def collision_stats(x: WalkPath, y: WalkPath, horizon: TimeWindow, check: bool = True) -> CollisionRecord:
    for p in (x, y):
        if not p.window.covers(horizon):
            raise DomainError("horizon must lie inside both path windows")
        if horizon.end >= p.forward_limit or horizon.start <= p.backward_limit:
            raise DomainError("a path explodes inside the horizon")
    intervals = _collision_intervals(x, y, horizon)
    leb = float(sum(b - a for a, b in intervals))
    ints = np.arange(math.ceil(horizon.start), math.floor(horizon.end) + 1)
    n_int = int(np.count_nonzero(x.position_ids(ints) == y.position_ids(ints))) if len(ints) else 0
    rec = CollisionRecord(horizon, n_int, leb, intervals)
    if check:
        alt = _unit_offset_measure(intervals, horizon)
        rec.unit_offset_measure = alt
        rec.identity_rel_error = abs(alt - leb) / leb if leb > 0 else abs(alt)
        if rec.identity_rel_error > COLLISION_IDENTITY_RTOL:
            raise CollisionIdentityError(
                f"Lebesgue measure {leb!r} disagrees with unit-offset integral {alt!r}"
            )
    return rec


def integers_covered(intervals, horizon: TimeWindow) -> int:
    """Integers in the union of [a, b) intervals, closing the one that ends at the horizon."""
    total = 0
    for a, b in intervals:
        top = math.floor(b) if b == horizon.end else math.ceil(b) - 1
        total += max(top - math.ceil(a) + 1, 0)
    return total
