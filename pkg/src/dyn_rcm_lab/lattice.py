"""Finite windows onto Z^d (d = 1, 2): censored L1 boxes and tori."""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import DomainError

Vertex = tuple[int, ...]
Edge = tuple[Vertex, Vertex]

BOX = "box"
TORUS = "torus"

LatticeError = DomainError


def canonical_edge(a: Vertex, b: Vertex) -> Edge:
    a, b = tuple(a), tuple(b)
    return (a, b) if a <= b else (b, a)


@dataclass(frozen=True)
class Lattice:
    """A box ``B_k = B(0, k)`` with censored boundary, or a torus of side ``n``.

    Vertices are enumerated row-major over coordinates and edges in
    (vertex, axis) lexicographic order, so ids are stable across runs.  A box
    only carries edges with both endpoints inside it.
    """

    dimension: int
    mode: str
    side_length: int

    def __post_init__(self):
        if self.dimension not in (1, 2):
            raise LatticeError(f"dimension must be 1 or 2, got {self.dimension}")
        if self.mode not in (BOX, TORUS):
            raise LatticeError(f"mode must be 'box' or 'torus', got {self.mode!r}")
        if self.mode == TORUS and self.side_length < 2:
            raise LatticeError("torus side must be at least 2")
        if self.mode == BOX and self.side_length < 0:
            raise LatticeError("box radius must be non-negative")

    @classmethod
    def box(cls, dimension: int, k: int) -> "Lattice":
        return cls(dimension, BOX, k)

    @classmethod
    def torus(cls, dimension: int, n: int) -> "Lattice":
        return cls(dimension, TORUS, n)

    @property
    def is_torus(self) -> bool:
        return self.mode == TORUS

    def to_json(self) -> dict:
        return {"dimension": self.dimension, "mode": self.mode, "side_length": self.side_length}

    # -- vertices ---------------------------------------------------------

    @cached_property
    def vertices(self) -> list[Vertex]:
        d, k = self.dimension, self.side_length
        if self.is_torus:
            return list(itertools.product(range(k), repeat=d))
        rng = range(-k, k + 1)
        return [v for v in itertools.product(rng, repeat=d) if sum(map(abs, v)) <= k]

    @cached_property
    def _vertex_index(self) -> dict[Vertex, int]:
        return {v: i for i, v in enumerate(self.vertices)}

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @cached_property
    def coords(self) -> np.ndarray:
        return np.array(self.vertices, dtype=np.int64).reshape(-1, self.dimension)

    @property
    def origin(self) -> Vertex:
        return (0,) * self.dimension

    def contains(self, v) -> bool:
        return tuple(v) in self._vertex_index

    def vertex_id(self, v) -> int:
        try:
            return self._vertex_index[tuple(v)]
        except KeyError:
            raise LatticeError(f"vertex {tuple(v)} is not in {self}") from None

    def vertex(self, i: int) -> Vertex:
        return self.vertices[i]

    # -- edges ------------------------------------------------------------

    @cached_property
    def edges(self) -> list[Edge]:
        out, seen = [], set()
        for v in self.vertices:
            for axis in range(self.dimension):
                w = list(v)
                w[axis] += 1
                if self.is_torus:
                    w[axis] %= self.side_length
                w = tuple(w)
                if not self.contains(w):
                    continue
                e = canonical_edge(v, w)
                # side-2 tori would otherwise list each edge twice
                if e not in seen:
                    seen.add(e)
                    out.append(e)
        return out

    @cached_property
    def _edge_index(self) -> dict[Edge, int]:
        return {e: i for i, e in enumerate(self.edges)}

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    @cached_property
    def edge_array(self) -> np.ndarray:
        """(n_edges, 2) array of endpoint vertex ids."""
        ids = [(self.vertex_id(a), self.vertex_id(b)) for a, b in self.edges]
        return np.array(ids, dtype=np.int64).reshape(-1, 2)

    def edge_id(self, e) -> int:
        key = canonical_edge(*e)
        try:
            return self._edge_index[key]
        except KeyError:
            raise LatticeError(f"edge {key} is not in {self}") from None

    def has_edge(self, e) -> bool:
        return canonical_edge(*e) in self._edge_index

    @cached_property
    def adjacency(self) -> list[tuple[tuple[int, int], ...]]:
        """Per vertex id: ((edge_id, neighbour_id), ...) in edge-id order."""
        adj: list[list[tuple[int, int]]] = [[] for _ in self.vertices]
        for eid, (a, b) in enumerate(self.edge_array.tolist()):
            adj[a].append((eid, b))
            adj[b].append((eid, a))
        return [tuple(row) for row in adj]

    @cached_property
    def degrees(self) -> np.ndarray:
        return np.array([len(row) for row in self.adjacency], dtype=np.int64)

    @cached_property
    def boundary_mask(self) -> np.ndarray:
        """Box vertices missing some of their 2d neighbours in Z^d."""
        if self.is_torus:
            return np.zeros(self.n_vertices, dtype=bool)
        return np.abs(self.coords).sum(axis=1) == self.side_length

    # -- translations (tori only) ------------------------------------------

    def translate(self, v, z) -> Vertex:
        if not self.is_torus:
            if any(z):
                raise LatticeError("spatial shifts are only defined on tori")
            return tuple(v)
        n = self.side_length
        return tuple((a + b) % n for a, b in zip(v, z))

    def translate_edge(self, e, z) -> Edge:
        a, b = e
        return canonical_edge(self.translate(a, z), self.translate(b, z))

    def translation_map(self, z) -> np.ndarray:
        """Vertex-id permutation ``perm[i] = id(vertex_i + z)``."""
        z = tuple(z)
        if not self.is_torus:
            if any(z):
                raise LatticeError("spatial shifts are only defined on tori")
            return np.arange(self.n_vertices)
        shifted = (self.coords + np.array(z)) % self.side_length
        return np.ravel_multi_index(tuple(shifted.T), (self.side_length,) * self.dimension)

    def edge_translation_map(self, z) -> np.ndarray:
        """Edge-id permutation ``perm[e] = id(e + z)``."""
        vmap = self.translation_map(z)
        ends = vmap[self.edge_array]
        lookup = {}
        for eid, (a, b) in enumerate(self.edge_array.tolist()):
            lookup[(a, b)] = eid
            lookup[(b, a)] = eid
        return np.array([lookup[(a, b)] for a, b in ends.tolist()], dtype=np.int64)

    def incident_edges(self, x) -> list[Edge]:
        return incident_edges(self, x)

    def __repr__(self) -> str:
        return f"Lattice(d={self.dimension}, {self.mode}, side={self.side_length})"


def incident_edges(lattice: Lattice, x) -> list[Edge]:
    xid = lattice.vertex_id(x)
    return [lattice.edges[eid] for eid, _ in lattice.adjacency[xid]]


@dataclass(frozen=True)
class Ball:
    center: Vertex
    radius: int
    norm: str = "l2"

    def __post_init__(self):
        if self.radius < 0:
            raise LatticeError("radius must be non-negative")
        if self.norm not in ("l1", "l2"):
            raise LatticeError(f"norm must be 'l1' or 'l2', got {self.norm!r}")

    def offsets(self, dimension: int) -> list[Vertex]:
        r = self.radius
        out = []
        for off in itertools.product(range(-r, r + 1), repeat=dimension):
            if self.norm == "l1":
                ok = sum(map(abs, off)) <= r
            else:
                ok = sum(a * a for a in off) <= r * r
            if ok:
                out.append(off)
        return out


def ball_members(lattice: Lattice, ball: Ball) -> list[Vertex]:
    center = tuple(ball.center)
    if len(center) != lattice.dimension:
        raise LatticeError("ball centre has the wrong dimension")
    lattice.vertex_id(center)
    offsets = ball.offsets(lattice.dimension)
    if lattice.is_torus:
        if 2 * ball.radius >= lattice.side_length:
            raise LatticeError(f"ball of radius {ball.radius} wraps around {lattice}")
        return [lattice.translate(center, off) for off in offsets]
    members = [tuple(c + o for c, o in zip(center, off)) for off in offsets]
    for v in members:
        if not lattice.contains(v):
            raise LatticeError(f"ball of radius {ball.radius} at {center} leaves {lattice}")
    return members
