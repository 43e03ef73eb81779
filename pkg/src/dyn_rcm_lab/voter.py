"""Voter model on a torus with dynamic copying rates.

Each undirected edge ``{x, y}`` carries two independent directed clocks, each
ringing at rate ``eta_t({x, y})``: one makes ``x`` copy ``y``, the other makes
``y`` copy ``x``.  Looking backwards from ``(site, t)``, the ancestor of the
site's label is a walk with the same jump rates run from ``t`` down to 0, so
its law is the backward kernel ``P_{t,0}(site, .)``; :func:`duality_check`
compares the two.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numba
import numpy as np

from .environment import EnvironmentSpec, Static, sample_environment
from .errors import DomainError
from .kernel import kernel_row
from .lattice import Lattice, Vertex
from .parallel import run_replicas
from .seeding import as_seed
from .verify import FAIL, PASS, SE_MARGIN, TestReport, _mean_se, _spec_meta
from .walker import sample_point_process

CONSENSUS_HORIZON_8X8 = 100.0

# slack for exact (zero-variance) comparisons against a kernel with 1e-12 truncation
_EXACT_SLACK = 1e-9


@dataclass
class OpinionField:
    assignment: dict
    time: float = 0.0
    labels: tuple | None = None

    def __post_init__(self):
        if self.labels is None:
            self.labels = tuple(sorted(set(self.assignment.values()), key=repr))
        bad = [v for v in self.assignment.values() if v not in self.labels]
        if bad:
            raise DomainError(f"labels {bad[:3]} are not in the declared label set")

    def validate_for(self, lattice: Lattice):
        if set(map(tuple, self.assignment)) != set(lattice.vertices):
            raise DomainError("every lattice vertex needs exactly one label")

    def codes(self, lattice: Lattice) -> np.ndarray:
        """Label index per vertex id."""
        self.validate_for(lattice)
        index = {lab: i for i, lab in enumerate(self.labels)}
        return np.array([index[self.assignment[v]] for v in lattice.vertices], dtype=np.int64)

    @classmethod
    def from_codes(cls, lattice: Lattice, codes, labels, time: float = 0.0) -> "OpinionField":
        return cls({v: labels[int(c)] for v, c in zip(lattice.vertices, codes)}, time, tuple(labels))

    @property
    def is_constant(self) -> bool:
        return len(set(self.assignment.values())) <= 1


@dataclass
class VoterTrace:
    lattice: Lattice
    initial: OpinionField
    horizon: float
    flip_times: np.ndarray
    flip_vertices: np.ndarray
    flip_labels: np.ndarray
    consensus_time: float | None
    meta: dict = field(default_factory=dict)

    @property
    def flips(self) -> list[tuple[float, Vertex, object]]:
        labs = self.initial.labels
        return [
            (float(t), self.lattice.vertex(int(v)), labs[int(c)])
            for t, v, c in zip(self.flip_times, self.flip_vertices, self.flip_labels)
        ]

    def codes_at(self, t: float) -> np.ndarray:
        codes = self.initial.codes(self.lattice)
        n = int(np.searchsorted(self.flip_times, t, side="right"))
        codes[self.flip_vertices[:n]] = self.flip_labels[:n]
        return codes

    def field_at(self, t: float) -> OpinionField:
        return OpinionField.from_codes(self.lattice, self.codes_at(t), self.initial.labels, t)

    def to_csv(self) -> str:
        lines = ["time,vertex,label"]
        for t, v, lab in self.flips:
            lines.append(f"{t!r},{' '.join(map(str, v))},{lab}")
        return "\n".join(lines) + "\n"


@numba.njit(cache=True)
def _run_events(codes, times, listener, speaker, n_labels):
    n = codes.shape[0]
    counts = np.zeros(n_labels, dtype=np.int64)
    for i in range(n):
        counts[codes[i]] += 1
    distinct = 0
    for c in counts:
        if c > 0:
            distinct += 1
    consensus = 0.0 if distinct <= 1 else -1.0
    ft = np.empty(times.shape[0])
    fv = np.empty(times.shape[0], dtype=np.int64)
    fl = np.empty(times.shape[0], dtype=np.int64)
    nf = 0
    for j in range(times.shape[0]):
        x = listener[j]
        new = codes[speaker[j]]
        old = codes[x]
        if new == old:
            continue
        codes[x] = new
        counts[old] -= 1
        counts[new] += 1
        if counts[old] == 0:
            distinct -= 1
        ft[nf] = times[j]
        fv[nf] = x
        fl[nf] = new
        nf += 1
        if distinct == 1 and consensus < 0:
            consensus = times[j]
    return ft[:nf], fv[:nf], fl[:nf], consensus


def run_voter(spec: EnvironmentSpec, initial: OpinionField, horizon: float, seed=0) -> VoterTrace:
    """Event-driven voter dynamics on ``[0, horizon]`` in a fresh environment."""
    lat = spec.lattice
    if not lat.is_torus:
        raise DomainError("the voter model runs on a torus")
    if horizon <= 0:
        raise DomainError("horizon must be positive")
    codes = initial.codes(lat)
    seed = as_seed(seed)
    traj = sample_environment(spec.with_window(0.0, float(horizon)), seed.derive(0))
    ends = lat.edge_array
    parts_t, parts_l, parts_s = [], [], []
    # clock 1: lower endpoint copies the upper one; clock 2: the reverse
    for stream, (li, si) in ((1, (0, 1)), (2, (1, 0))):
        pp = sample_point_process(traj, seed.derive(stream))
        for eid, ts in enumerate(pp.times):
            if len(ts):
                parts_t.append(ts)
                parts_l.append(np.full(len(ts), ends[eid, li]))
                parts_s.append(np.full(len(ts), ends[eid, si]))
    if parts_t:
        t_all = np.concatenate(parts_t)
        order = np.argsort(t_all, kind="stable")
        t_all = t_all[order]
        lis = np.concatenate(parts_l)[order]
        sps = np.concatenate(parts_s)[order]
    else:
        t_all, lis, sps = np.empty(0), np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64)
    ft, fv, fl, cons = _run_events(codes.copy(), t_all, lis, sps, len(initial.labels))
    return VoterTrace(
        lat,
        initial,
        float(horizon),
        ft,
        fv,
        fl,
        None if cons < 0 else float(cons),
        {"events": int(len(t_all)), "seed": seed.to_json()},
    )


def half_half_field(lattice: Lattice, labels=(0, 1)) -> OpinionField:
    """First half of the vertices (in id order) get ``labels[0]``, the rest ``labels[1]``."""
    n = lattice.n_vertices
    return OpinionField({v: labels[0] if i < n // 2 else labels[1] for i, v in enumerate(lattice.vertices)}, 0.0, tuple(labels))


def random_binary_field(lattice: Lattice, rng: np.random.Generator) -> OpinionField:
    codes = rng.integers(0, 2, lattice.n_vertices)
    return OpinionField.from_codes(lattice, codes, (0, 1))


def _duality_worker(payload, lo, hi):
    spec, initial, site, t, base = payload
    lat = spec.lattice
    codes = initial.codes(lat)
    sid = lat.vertex_id(site)
    n_labels = len(initial.labels)
    window_spec = spec.with_window(0.0, float(t))
    fixed = None
    if isinstance(spec.kind, Static):
        # one deterministic environment: the dual row is the same for every replica
        row = kernel_row(sample_environment(window_spec, base), site, t, 0.0)
        fixed = np.bincount(codes, weights=row, minlength=n_labels).tolist()
    out = []
    for i in range(lo, hi):
        s = base.derive(i)
        trace = run_voter(spec, initial, t, s)
        n = int(np.searchsorted(trace.flip_times, t, side="right"))
        hits = np.nonzero(trace.flip_vertices[:n] == sid)[0]
        observed = int(trace.flip_labels[hits[-1]]) if len(hits) else int(codes[sid])
        if fixed is None:
            row = kernel_row(sample_environment(window_spec, s.derive(0)), site, t, 0.0)
            pred = np.bincount(codes, weights=row, minlength=n_labels).tolist()
        else:
            pred = fixed
        out.append((observed, pred))
    return out


def duality_check(spec: EnvironmentSpec, initial: OpinionField, site, t: float, replicas: int, seed=0, threads: int = 1) -> TestReport:
    """Label law at ``(site, t)`` against the dual-walk prediction, label by label.

    Each replica draws its own environment; the prediction for that replica
    is the exact backward kernel row in the same environment, so the
    per-replica differences are paired.
    """
    lat = spec.lattice
    site = tuple(site)
    lat.vertex_id(site)
    if t < 0 or replicas < 1:
        raise DomainError("need t >= 0 and replicas >= 1")
    seed = as_seed(seed)
    n_labels = len(initial.labels)
    if t == 0:
        code = initial.codes(lat)[lat.vertex_id(site)]
        rows = [(int(code), [1.0 if j == code else 0.0 for j in range(n_labels)])] * replicas
    else:
        rows = run_replicas(_duality_worker, (spec, initial, site, float(t), seed), replicas, threads)
    observed = np.array([r[0] for r in rows])
    pred = np.array([r[1] for r in rows]).reshape(replicas, n_labels)
    per_label, worst, worst_z = [], None, -1.0
    verdict = PASS
    for j, lab in enumerate(initial.labels):
        d = (observed == j).astype(float) - pred[:, j]
        md, se = _mean_se(d) if replicas > 1 else (float(d[0]), 0.0)
        freq = float(np.mean(observed == j))
        ok = abs(md) <= SE_MARGIN * se + _EXACT_SLACK
        verdict = verdict if ok else FAIL
        z = abs(md) / se if se > 0 else (0.0 if abs(md) <= _EXACT_SLACK else math.inf)
        per_label.append(
            {"label": lab, "frequency": freq, "prediction": float(pred[:, j].mean()), "mean_difference": md, "se": se}
        )
        if z > worst_z:
            worst_z, worst = z, (freq, float(pred[:, j].mean()), se)
    meta = _spec_meta(spec) | {"site": list(site), "t": t, "per_label": per_label, "seed": seed.to_json()}
    return TestReport("voter_duality", worst[0], worst[1], worst[2], replicas, verdict, "identity", meta)


def _consensus_worker(payload, lo, hi):
    spec, horizon, base = payload
    out = []
    for i in range(lo, hi):
        s = base.derive(i)
        init = random_binary_field(spec.lattice, s.derive(9).rng())
        trace = run_voter(spec, init, horizon, s)
        out.append(trace.consensus_time)
    return out


def consensus_times(spec: EnvironmentSpec, horizon: float, replicas: int, seed=0, threads: int = 1) -> list:
    """Consensus times (None when not reached by ``horizon``) from random binary fields."""
    return run_replicas(_consensus_worker, (spec, float(horizon), as_seed(seed)), replicas, threads)


def consensus_fraction(spec: EnvironmentSpec, horizon: float, replicas: int, seed=0, target: float = 0.95, threads: int = 1) -> TestReport:
    times = consensus_times(spec, horizon, replicas, seed, threads)
    reached = np.array([t is not None for t in times], dtype=float)
    frac, se = _mean_se(reached)
    finite = sorted(t for t in times if t is not None)
    meta = _spec_meta(spec) | {
        "horizon": horizon,
        "median_consensus_time": finite[len(finite) // 2] if finite else None,
        "seed": as_seed(seed).to_json(),
    }
    return TestReport("voter_consensus_fraction", frac, target, se, replicas, PASS if frac >= target else FAIL, "lower_bound", meta)


__all__ = [
    "OpinionField",
    "VoterTrace",
    "run_voter",
    "duality_check",
    "consensus_fraction",
    "consensus_times",
    "half_half_field",
    "random_binary_field",
]
